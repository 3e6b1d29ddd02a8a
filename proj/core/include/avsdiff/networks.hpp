#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "avsdiff/autodiff.hpp"
#include "avsdiff/rng.hpp"
#include "avsdiff/tensor.hpp"

namespace avsdiff {

enum class Variant { kLdm, kCvae, kEd };
enum class ConditionMode { kAudioVisual, kAudio, kVisual, kNone };

std::string variant_name(Variant v);
std::string condition_mode_name(ConditionMode m);
Variant variant_from_name(const std::string& s);
ConditionMode condition_mode_from_name(const std::string& s);

/// Architecture hyper-parameters. The defaults are the desk-scale production
/// sizes; tiny() shrinks every width for finite-difference checks.
struct ModelConfig {
  Variant variant = Variant::kLdm;
  int height = 64;
  int width = 64;
  int frames = 5;
  int audio_dim = 16;
  int latent_dim = 24;  // D
  int cond_dim = 24;    // D_c, matches D so cosine scores need no projection
  int time_embed_dim = 32;

  // Ground-truth encoder: five conv blocks, then two fully connected layers.
  std::vector<int> gt_channels{16, 32, 64, 64, 64};
  int gt_fc_hidden = 64;

  // Conditional encoder: the visual branch mirrors the ground-truth encoder;
  // the audio branch and the post-concat fusion are fully connected.
  int audio_fc_hidden = 32;

  // Per-frame visual backbone for fusion: stem plus four strided stages.
  std::vector<int> backbone_channels{16, 16, 32, 64, 128};
  int fusion_width = 32;   // common channel width of V_l / G_l
  int audio_tokens = 4;    // audio expands to this many attention key/values
  int attn_key_dim = 16;

  // Noise estimator: eight fully connected layers with mirrored skips.
  int noise_hidden = 128;

  // Decoder head widths after the top-down merge.
  int head_mid = 16;
  int head_fine = 8;

  // CVAE posterior/prior heads.
  int cvae_hidden = 64;

  double leaky_slope = 0.2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static ModelConfig desk_default() { return ModelConfig{}; }
  static ModelConfig tiny();

  void validate() const;
};

Tensor sinusoidal_time_embedding(const std::vector<int>& ks, int dim);

// --- layer building blocks -------------------------------------------------

struct DenseLayer {
  Param* w = nullptr;
  Param* b = nullptr;
  NodeId operator()(Tape& t, NodeId x) const;
};

struct ConvLayer {
  Param* w = nullptr;
  Param* b = nullptr;
  int stride = 1;
  int padding = 1;
  NodeId operator()(Tape& t, NodeId x) const;
};

struct BatchNormLayer {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double eps = 1e-5;
  double momentum = 0.1;
  NodeId operator()(Tape& t, NodeId x, NetMode mode) const;
};

/// conv -> leakyReLU -> batch norm.
struct ConvBlock {
  ConvLayer conv;
  BatchNormLayer bn;
  double slope = 0.2;
  NodeId operator()(Tape& t, NodeId x, NetMode mode) const;
};

// --- model components ------------------------------------------------------

/// E_phi: mask [B,1,H,W] -> latent z0 [B,D].
struct GtEncoder {
  std::vector<ConvBlock> blocks;
  DenseLayer fc1, fc2;
  double slope = 0.2;
  NodeId encode(Tape& t, NodeId y, NetMode mode) const;
};

/// E_psi: (frames [B,3,H,W], audio [B,d]) -> condition c [B,D_c].
/// Unimodal modes zero the other branch before the fusion layers.
struct CondEncoder {
  std::vector<ConvBlock> visual_blocks;
  DenseLayer visual_fc1, visual_fc2;
  DenseLayer audio_fc1, audio_fc2;
  DenseLayer fuse_fc1, fuse_fc2;
  double slope = 0.2;
  NodeId encode(Tape& t, NodeId frames, NodeId audio, ConditionMode mode, NetMode nm) const;
};

/// eps_theta: (z_k [B,D], c or null, per-row k) -> predicted noise [B,D].
/// Four encoder layers, four decoder layers, mirrored skip concatenation;
/// the last layer is linear so the regression output is unconstrained.
struct NoiseEstimator {
  std::array<DenseLayer, 8> layers;
  Param* null_cond = nullptr;
  int time_embed_dim = 32;
  double slope = 0.2;
  NodeId estimate(Tape& t, NodeId zk, std::optional<NodeId> c, const std::vector<int>& ks) const;
};

/// Per-frame visual backbone, 1x1 projections to a common width, and one
/// single-head cross-modal attention block per level. Each pixel queries a
/// small set of key/value tokens derived from that frame's audio feature and
/// the result is added residually, so G_l moves when the audio moves.
struct FusionStack {
  std::vector<ConvBlock> backbone;  // stem + 4 strided stages
  std::array<ConvLayer, 4> proj;    // F_l -> V_l, 1x1
  struct Attention {
    ConvLayer query;  // 1x1, fusion_width -> key_dim
    DenseLayer key;   // audio d -> tokens*key_dim
    DenseLayer value; // audio d -> tokens*fusion_width
  };
  std::array<Attention, 4> attn;
  int tokens = 4;
  int key_dim = 16;
  double slope = 0.2;

  /// Returns {G_1..G_4}; spatial size of G_l is (H,W) / 2^(l+1).
  std::array<NodeId, 4> fuse(Tape& t, NodeId frames, NodeId audio, NetMode mode) const;
};

/// Latent expansion D_tau, the G4 merge, and the FPN-style top-down decoder
/// ending in a sigmoid mask head at full resolution.
struct SegDecoder {
  ConvLayer d_tau;              // 3x3 over the tiled latent
  ConvLayer g4_merge;           // 3x3 over concat(G4, expanded latent)
  std::array<ConvLayer, 3> lateral;  // 1x1 on G_1..G_3
  ConvLayer head_mid;           // 3x3 at 1/4 scale
  ConvLayer head_fine;          // 3x3 at 1/2 scale
  ConvLayer head_out;           // 1x1 at full scale
  double slope = 0.2;

  /// [B,D] -> [B,D,h4,w4]: tile, then the D_tau conv.
  NodeId expand(Tape& t, NodeId z0, int h4, int w4) const;
  /// concat(G4, z_expanded) -> 3x3 conv -> G4_hat (same shape as G4).
  NodeId merge_g4(Tape& t, NodeId g4, NodeId z_expanded) const;
  /// {G_1..G_3, G4_hat} -> mask in (0,1), [B,1,H,W].
  NodeId decode(Tape& t, const std::array<NodeId, 4>& levels) const;
};

/// CVAE posterior/prior heads over the fused features (and the mask for the
/// posterior). Outputs (mu, log sigma) pairs of the latent dimension.
struct CvaeHeads {
  GtEncoder mask_encoder;
  DenseLayer post_fc1, post_fc2;   // concat(mask feat, GAP(G4)) -> 2D
  DenseLayer prior_fc1, prior_fc2; // GAP(G4) -> 2D
  double slope = 0.2;
  std::pair<NodeId, NodeId> posterior(Tape& t, NodeId mask, NodeId g4, NetMode mode) const;
  std::pair<NodeId, NodeId> prior(Tape& t, NodeId g4) const;
};

/// All trainable state for one variant. Parameters are registered in a fixed
/// construction order; checkpoints rely on that order.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  bool has_latent_path() const { return config_.variant != Variant::kEd; }
  bool has_diffusion() const { return config_.variant == Variant::kLdm; }

  const GtEncoder& gt_encoder() const;
  const CondEncoder& cond_encoder() const;
  const NoiseEstimator& noise_estimator() const;
  const FusionStack& fusion() const { return fusion_; }
  const SegDecoder& decoder() const { return decoder_; }
  const CvaeHeads& cvae() const;

 private:
  ModelConfig config_;
  ParamStore store_;
  GtEncoder gt_encoder_;
  CondEncoder cond_encoder_;
  NoiseEstimator noise_estimator_;
  FusionStack fusion_;
  SegDecoder decoder_;
  CvaeHeads cvae_;
};

}  // namespace avsdiff
