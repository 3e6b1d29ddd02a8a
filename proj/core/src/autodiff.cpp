#include "avsdiff/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace avsdiff {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int num_threads() { return g_threads.load(); }

namespace kernels {

void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (num_threads() > 1 && static_cast<long long>(m) * k * n > 262144)
#endif
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor transpose2d(const Tensor& t) {
  const int m = t.dim(0), n = t.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<std::int64_t>(j) * m + i] = t[static_cast<std::int64_t>(i) * n + j];
  }
  return out;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param& ParamStore::create(const std::string& name, Tensor init) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Param>(name, std::move(init)));
  return *params_.back();
}

Tensor& ParamStore::buffer(const std::string& name, Tensor init) {
  if (find_buffer(name) != nullptr) throw ContractError("duplicate buffer name: " + name);
  buffers_.push_back(std::make_unique<NamedBuffer>(NamedBuffer{name, std::move(init)}));
  return buffers_.back()->value;
}

std::vector<std::pair<std::string, Tensor*>> ParamStore::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.reserve(buffers_.size());
  for (auto& b : buffers_) out.emplace_back(b->name, &b->value);
  return out;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Tensor* ParamStore::find_buffer(const std::string& name) {
  for (auto& b : buffers_) {
    if (b->name == name) return &b->value;
  }
  return nullptr;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

std::int64_t ParamStore::total_param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tape basics
// ---------------------------------------------------------------------------

NodeId Tape::push(Tensor value, std::vector<NodeId> parents,
                  std::function<void(Tape&, NodeId)> back) {
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(back), nullptr});
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(NodeId id) {
  Tensor& g = grads_[static_cast<size_t>(id)];
  if (g.empty() && node(id).value.size() > 0) g = Tensor::zeros(node(id).value.shape());
  if (g.empty() && node(id).value.size() == 0) g = Tensor(node(id).value.shape());
  return g;
}

NodeId Tape::constant(Tensor v) { return push(std::move(v), {}, nullptr); }

NodeId Tape::param(Param& p) {
  NodeId id = push(p.value, {}, nullptr);
  nodes_.back().bound = &p;
  return id;
}

void Tape::backward(NodeId loss) {
  if (node(loss).value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_to_string(node(loss).value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor{});
  grad_buf(loss)[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) continue;
    if (n.bound != nullptr) {
      double* pg = n.bound->grad.data();
      const double* ng = g.data();
      for (std::int64_t i = 0; i < g.size(); ++i) pg[i] += ng[i];
    }
    if (n.back) n.back(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

NodeId Tape::add(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "add");
  Tensor out = value(a);
  const double* pb = value(b).data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "sub");
  Tensor out = value(a);
  const double* pb = value(b).data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

NodeId Tape::mul(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "mul");
  Tensor out = value(a);
  const double* pb = value(b).data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    Tensor& ga = t.grad_buf(a);
    Tensor& gb = t.grad_buf(b);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * vb[i];
      gb[i] += g[i] * va[i];
    }
  });
}

NodeId Tape::affine(NodeId a, double scale, double shift) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = out[i] * scale + shift;
  return push(std::move(out), {a}, [a, scale](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * scale;
  });
}

NodeId Tape::cmul(NodeId a, Tensor weights) {
  require_same_shape(value(a), weights, "cmul");
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= weights[i];
  auto w = std::make_shared<Tensor>(std::move(weights));
  return push(std::move(out), {a}, [a, w](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*w)[i];
  });
}

NodeId Tape::leaky_relu(NodeId a, double slope) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) {
    if (out[i] < 0.0) out[i] *= slope;
  }
  // Subgradient at exactly 0 is defined as `slope` (one-sided choice).
  return push(std::move(out), {a}, [a, slope](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : slope);
  });
}

NodeId Tape::sigmoid(NodeId a) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

NodeId Tape::exp(NodeId a) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

NodeId Tape::log(NodeId a) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

NodeId Tape::clamp(NodeId a, double lo, double hi) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  return push(std::move(out), {a}, [a, lo, hi](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      if (x[i] > lo && x[i] < hi) ga[i] += g[i];
    }
  });
}

NodeId Tape::detach(NodeId a) { return constant(value(a)); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(va.shape()) + " vs " +
                         shape_to_string(vb.shape()));
  }
  const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out({m, n});
  kernels::mm_acc(va.data(), vb.data(), out.data(), m, k, n);
  return push(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    // dA = g . B^T, dB = A^T . g
    Tensor bt = kernels::transpose2d(t.value(b));
    kernels::mm_acc(g.data(), bt.data(), t.grad_buf(a).data(), m, n, k);
    Tensor at = kernels::transpose2d(t.value(a));
    kernels::mm_acc(at.data(), g.data(), t.grad_buf(b).data(), k, m, n);
  });
}

NodeId Tape::transpose(NodeId a) {
  const Tensor& va = value(a);
  if (va.rank() != 2) throw DimensionError("transpose: need rank 2, got " + shape_to_string(va.shape()));
  return push(kernels::transpose2d(va), {a}, [a](Tape& t, NodeId self) {
    Tensor gt = kernels::transpose2d(t.grads_[static_cast<size_t>(self)]);
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < gt.size(); ++i) ga[i] += gt[i];
  });
}

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1)) {
    throw DimensionError("linear: x " + shape_to_string(vx.shape()) + " vs w " +
                         shape_to_string(vw.shape()));
  }
  const int n = vx.dim(0), in = vx.dim(1), out_w = vw.dim(0);
  if (b >= 0 && value(b).size() != out_w) {
    throw DimensionError("linear: bias " + shape_to_string(value(b).shape()) + " vs out width " +
                         std::to_string(out_w));
  }
  Tensor wt = kernels::transpose2d(vw);  // [in, out]
  Tensor out({n, out_w});
  kernels::mm_acc(vx.data(), wt.data(), out.data(), n, in, out_w);
  if (b >= 0) {
    const double* pb = value(b).data();
    for (int i = 0; i < n; ++i) {
      double* row = out.data() + static_cast<size_t>(i) * out_w;
      for (int j = 0; j < out_w; ++j) row[j] += pb[j];
    }
  }
  return push(std::move(out), b >= 0 ? std::vector<NodeId>{x, w, b} : std::vector<NodeId>{x, w},
              [x, w, b, n, in, out_w](Tape& t, NodeId self) {
                const Tensor& g = t.grads_[static_cast<size_t>(self)];  // [n, out]
                // dx = g . W ; dW = g^T . x ; db = column sums of g
                kernels::mm_acc(g.data(), t.value(w).data(), t.grad_buf(x).data(), n, out_w, in);
                Tensor gt = kernels::transpose2d(g);  // [out, n]
                kernels::mm_acc(gt.data(), t.value(x).data(), t.grad_buf(w).data(), out_w, n, in);
                if (b >= 0) {
                  Tensor& gb = t.grad_buf(b);
                  for (int i = 0; i < n; ++i) {
                    const double* row = g.data() + static_cast<size_t>(i) * out_w;
                    for (int j = 0; j < out_w; ++j) gb[j] += row[j];
                  }
                }
              });
}

NodeId Tape::linear(NodeId x, NodeId w) { return linear(x, w, -1); }

namespace {

struct ConvDims {
  int b, c, h, w;      // input
  int o, kh, kw;       // kernel
  int oh, ow;          // output
  int stride, pad;
  int rows() const { return b * oh * ow; }
  int cols() const { return c * kh * kw; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int padding) {
  if (x.rank() != 4 || k.rank() != 4) {
    throw DimensionError("conv2d: need x [B,C,H,W] and kernel [O,C,kh,kw], got " +
                         shape_to_string(x.shape()) + " and " + shape_to_string(k.shape()));
  }
  if (x.dim(1) != k.dim(1)) {
    throw DimensionError("conv2d: channel mismatch " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(k.shape()));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  ConvDims d{};
  d.b = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.o = k.dim(0);
  d.kh = k.dim(2);
  d.kw = k.dim(3);
  d.stride = stride;
  d.pad = padding;
  const int ph = d.h + 2 * padding, pw = d.w + 2 * padding;
  if (d.kh > ph || d.kw > pw) {
    throw DimensionError("conv2d: kernel " + shape_to_string(k.shape()) +
                         " larger than padded input " + shape_to_string(x.shape()));
  }
  if ((ph - d.kh) % stride != 0 || (pw - d.kw) % stride != 0) {
    throw DimensionError("conv2d: non-integral output size for input " +
                         shape_to_string(x.shape()) + ", kernel " + shape_to_string(k.shape()) +
                         ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
  }
  d.oh = (ph - d.kh) / stride + 1;
  d.ow = (pw - d.kw) / stride + 1;
  return d;
}

// Column c index order is (channel, ky, kx), matching the accumulation order
// of the naive reference convolution.
Tensor im2col(const Tensor& x, const ConvDims& d) {
  Tensor col({d.rows(), d.cols()});
  double* out = col.data();
  for (int b = 0; b < d.b; ++b) {
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        double* row = out;
        for (int c = 0; c < d.c; ++c) {
          const double* plane = x.data() + (static_cast<size_t>(b) * d.c + c) * d.h * d.w;
          for (int ky = 0; ky < d.kh; ++ky) {
            const int iy = oy * d.stride - d.pad + ky;
            for (int kx = 0; kx < d.kw; ++kx) {
              const int ix = ox * d.stride - d.pad + kx;
              *row++ = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                           ? plane[static_cast<size_t>(iy) * d.w + ix]
                           : 0.0;
            }
          }
        }
        out += d.cols();
      }
    }
  }
  return col;
}

void col2im_acc(const Tensor& col, const ConvDims& d, Tensor& dx) {
  const double* in = col.data();
  for (int b = 0; b < d.b; ++b) {
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        const double* row = in;
        for (int c = 0; c < d.c; ++c) {
          double* plane = dx.data() + (static_cast<size_t>(b) * d.c + c) * d.h * d.w;
          for (int ky = 0; ky < d.kh; ++ky) {
            const int iy = oy * d.stride - d.pad + ky;
            for (int kx = 0; kx < d.kw; ++kx) {
              const int ix = ox * d.stride - d.pad + kx;
              if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
                plane[static_cast<size_t>(iy) * d.w + ix] += *row;
              }
              ++row;
            }
          }
        }
        in += d.cols();
      }
    }
  }
}

}  // namespace

NodeId Tape::conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  const ConvDims d = conv_dims(vx, vw, stride, padding);
  if (b >= 0 && value(b).size() != d.o) {
    throw DimensionError("conv2d: bias size " + std::to_string(value(b).size()) +
                         " vs out channels " + std::to_string(d.o));
  }
  Tensor col = im2col(vx, d);
  Tensor wt({d.cols(), d.o});
  {
    const double* pw = vw.data();
    for (int o = 0; o < d.o; ++o) {
      for (int cc = 0; cc < d.cols(); ++cc) {
        wt[static_cast<std::int64_t>(cc) * d.o + o] = pw[static_cast<size_t>(o) * d.cols() + cc];
      }
    }
  }
  Tensor tmp({d.rows(), d.o});
  kernels::mm_acc(col.data(), wt.data(), tmp.data(), d.rows(), d.cols(), d.o);
  Tensor out({d.b, d.o, d.oh, d.ow});
  {
    const double* pb = b >= 0 ? value(b).data() : nullptr;
    for (int bb = 0; bb < d.b; ++bb) {
      for (int p = 0; p < d.oh * d.ow; ++p) {
        const double* trow = tmp.data() + (static_cast<size_t>(bb) * d.oh * d.ow + p) * d.o;
        for (int o = 0; o < d.o; ++o) {
          out[((static_cast<std::int64_t>(bb) * d.o + o) * d.oh * d.ow) + p] =
              trow[o] + (pb ? pb[o] : 0.0);
        }
      }
    }
  }
  return push(std::move(out),
              b >= 0 ? std::vector<NodeId>{x, w, b} : std::vector<NodeId>{x, w},
              [x, w, b, d](Tape& t, NodeId self) {
                const Tensor& g = t.grads_[static_cast<size_t>(self)];
                // Reassemble dtmp [rows, O] from g's [B,O,oh,ow] layout.
                Tensor dtmp({d.rows(), d.o});
                for (int bb = 0; bb < d.b; ++bb) {
                  for (int p = 0; p < d.oh * d.ow; ++p) {
                    double* row = dtmp.data() + (static_cast<size_t>(bb) * d.oh * d.ow + p) * d.o;
                    for (int o = 0; o < d.o; ++o) {
                      row[o] = g[((static_cast<std::int64_t>(bb) * d.o + o) * d.oh * d.ow) + p];
                    }
                  }
                }
                if (b >= 0) {
                  Tensor& gb = t.grad_buf(b);
                  for (int r = 0; r < d.rows(); ++r) {
                    const double* row = dtmp.data() + static_cast<size_t>(r) * d.o;
                    for (int o = 0; o < d.o; ++o) gb[o] += row[o];
                  }
                }
                // dW[o, col] += sum_r dtmp[r,o] * colmat[r,col]
                Tensor col = im2col(t.value(x), d);
                Tensor dtmp_t = kernels::transpose2d(dtmp);  // [O, rows]
                kernels::mm_acc(dtmp_t.data(), col.data(), t.grad_buf(w).data(), d.o, d.rows(),
                                d.cols());
                // dcol[r, col] = sum_o dtmp[r,o] * W[o,col]; then scatter.
                Tensor dcol({d.rows(), d.cols()});
                kernels::mm_acc(dtmp.data(), t.value(w).data(), dcol.data(), d.rows(), d.o,
                                d.cols());
                col2im_acc(dcol, d, t.grad_buf(x));
              });
}

NodeId Tape::conv2d(NodeId x, NodeId w, int stride, int padding) {
  return conv2d(x, w, -1, stride, padding);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

NodeId Tape::reshape(NodeId a, std::vector<int> shape) {
  const Tensor& va = value(a);
  if (shape_numel(shape) != va.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(va.shape()) + " as " +
                         shape_to_string(shape));
  }
  Tensor out(std::move(shape), va.vec());
  return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

NodeId Tape::slice0(NodeId a, int begin, int end) {
  const Tensor& va = value(a);
  if (va.rank() < 1 || begin < 0 || end > va.dim(0) || begin >= end) {
    throw ContractError("slice0: bad range [" + std::to_string(begin) + ", " +
                        std::to_string(end) + ") for shape " + shape_to_string(va.shape()));
  }
  std::int64_t inner = 1;
  for (int i = 1; i < va.rank(); ++i) inner *= va.dim(i);
  std::vector<int> shape = va.shape();
  shape[0] = end - begin;
  Tensor out(shape);
  std::copy(va.data() + begin * inner, va.data() + end * inner, out.data());
  return push(std::move(out), {a}, [a, begin, inner](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    double* dst = ga.data() + begin * inner;
    for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

NodeId Tape::concat(const std::vector<NodeId>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Tensor& first = value(parts[0]);
  if (axis < 0 || axis >= first.rank()) {
    throw ContractError("concat: axis " + std::to_string(axis) + " out of range for " +
                        shape_to_string(first.shape()));
  }
  std::vector<int> shape = first.shape();
  int total_axis = 0;
  for (NodeId p : parts) {
    const Tensor& v = value(p);
    if (v.rank() != first.rank()) {
      throw DimensionError("concat: rank mismatch " + shape_to_string(v.shape()) + " vs " +
                           shape_to_string(first.shape()));
    }
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && v.dim(i) != first.dim(i)) {
        throw DimensionError("concat: shape mismatch " + shape_to_string(v.shape()) + " vs " +
                             shape_to_string(first.shape()) + " on axis " + std::to_string(i));
      }
    }
    total_axis += v.dim(axis);
  }
  shape[static_cast<size_t>(axis)] = total_axis;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);

  Tensor out(shape);
  std::int64_t axis_offset = 0;
  for (NodeId p : parts) {
    const Tensor& v = value(p);
    const std::int64_t span = v.dim(axis) * inner;
    for (std::int64_t ou = 0; ou < outer; ++ou) {
      std::copy(v.data() + ou * span, v.data() + (ou + 1) * span,
                out.data() + ou * total_axis * inner + axis_offset * inner);
    }
    axis_offset += v.dim(axis);
  }
  std::vector<NodeId> parents = parts;
  const std::int64_t inner_c = inner, outer_c = outer;
  const int total = total_axis;
  return push(std::move(out), parents,
              [parents, inner_c, outer_c, total, axis](Tape& t, NodeId self) {
                const Tensor& g = t.grads_[static_cast<size_t>(self)];
                std::int64_t axis_offset = 0;
                for (NodeId p : parents) {
                  Tensor& gp = t.grad_buf(p);
                  const int pa = t.value(p).dim(axis);
                  const std::int64_t span = pa * inner_c;
                  for (std::int64_t ou = 0; ou < outer_c; ++ou) {
                    const double* src = g.data() + ou * total * inner_c + axis_offset * inner_c;
                    double* dst = gp.data() + ou * span;
                    for (std::int64_t i = 0; i < span; ++i) dst[i] += src[i];
                  }
                  axis_offset += pa;
                }
              });
}

NodeId Tape::broadcast_row(NodeId row, int copies) {
  const Tensor& v = value(row);
  const int dcount = static_cast<int>(v.size());
  Tensor out({copies, dcount});
  for (int i = 0; i < copies; ++i) {
    std::copy(v.data(), v.data() + dcount, out.data() + static_cast<size_t>(i) * dcount);
  }
  return push(std::move(out), {row}, [row, copies, dcount](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& gr = t.grad_buf(row);
    for (int i = 0; i < copies; ++i) {
      const double* src = g.data() + static_cast<size_t>(i) * dcount;
      for (int j = 0; j < dcount; ++j) gr[j] += src[j];
    }
  });
}

NodeId Tape::tile_spatial(NodeId a, int h, int w) {
  const Tensor& v = value(a);
  if (v.rank() != 2) throw DimensionError("tile_spatial: need [B,D], got " + shape_to_string(v.shape()));
  const int b = v.dim(0), d = v.dim(1);
  Tensor out({b, d, h, w});
  for (int bb = 0; bb < b; ++bb) {
    for (int dd = 0; dd < d; ++dd) {
      const double x = v[static_cast<std::int64_t>(bb) * d + dd];
      double* plane = out.data() + (static_cast<size_t>(bb) * d + dd) * h * w;
      std::fill(plane, plane + static_cast<size_t>(h) * w, x);
    }
  }
  return push(std::move(out), {a}, [a, b, d, h, w](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (int bb = 0; bb < b; ++bb) {
      for (int dd = 0; dd < d; ++dd) {
        const double* plane = g.data() + (static_cast<size_t>(bb) * d + dd) * h * w;
        double acc = 0.0;
        for (int i = 0; i < h * w; ++i) acc += plane[i];
        ga[static_cast<std::int64_t>(bb) * d + dd] += acc;
      }
    }
  });
}

NodeId Tape::upsample2x(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 4) throw DimensionError("upsample2x: need [B,C,H,W], got " + shape_to_string(v.shape()));
  const int b = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  Tensor out({b, c, 2 * h, 2 * w});
  for (int p = 0; p < b * c; ++p) {
    const double* src = v.data() + static_cast<size_t>(p) * h * w;
    double* dst = out.data() + static_cast<size_t>(p) * 4 * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double val = src[static_cast<size_t>(y) * w + x];
        double* d0 = dst + (static_cast<size_t>(2 * y) * 2 * w + 2 * x);
        d0[0] = val;
        d0[1] = val;
        d0[2 * w] = val;
        d0[2 * w + 1] = val;
      }
    }
  }
  return push(std::move(out), {a}, [a, b, c, h, w](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (int p = 0; p < b * c; ++p) {
      const double* src = g.data() + static_cast<size_t>(p) * 4 * h * w;
      double* dst = ga.data() + static_cast<size_t>(p) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double* s0 = src + (static_cast<size_t>(2 * y) * 2 * w + 2 * x);
          dst[static_cast<size_t>(y) * w + x] += s0[0] + s0[1] + s0[2 * w] + s0[2 * w + 1];
        }
      }
    }
  });
}

NodeId Tape::global_avg_pool(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 4) throw DimensionError("global_avg_pool: need [B,C,H,W], got " + shape_to_string(v.shape()));
  const int b = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out({b, c});
  for (int p = 0; p < b * c; ++p) {
    const double* src = v.data() + static_cast<size_t>(p) * hw;
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += src[i];
    out[p] = acc / hw;
  }
  return push(std::move(out), {a}, [a, b, c, hw](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    Tensor& ga = t.grad_buf(a);
    for (int p = 0; p < b * c; ++p) {
      const double gv = g[p] / hw;
      double* dst = ga.data() + static_cast<size_t>(p) * hw;
      for (int i = 0; i < hw; ++i) dst[i] += gv;
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise ops
// ---------------------------------------------------------------------------

NodeId Tape::row_l2_normalize(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 2) throw DimensionError("row_l2_normalize: need [N,D], got " + shape_to_string(v.shape()));
  const int n = v.dim(0), d = v.dim(1);
  Tensor out = v;
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += row[j] * row[j];
    const double norm = std::sqrt(s);
    if (!(norm > 1e-12)) {
      throw ContractError("degenerate embedding: zero-norm row " + std::to_string(i) +
                          " in row_l2_normalize");
    }
    (*norms)[static_cast<size_t>(i)] = norm;
    for (int j = 0; j < d; ++j) row[j] /= norm;
  }
  return push(std::move(out), {a}, [a, n, d, norms](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < n; ++i) {
      const double* gr = g.data() + static_cast<size_t>(i) * d;
      const double* yr = y.data() + static_cast<size_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
      const double inv = 1.0 / (*norms)[static_cast<size_t>(i)];
      double* dst = ga.data() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) dst[j] += (gr[j] - yr[j] * dot) * inv;
    }
  });
}

NodeId Tape::softmax_rows(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 2) throw DimensionError("softmax_rows: need [N,M], got " + shape_to_string(v.shape()));
  const int n = v.dim(0), m = v.dim(1);
  Tensor out = v;
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * m;
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j < m; ++j) row[j] /= s;
  }
  return push(std::move(out), {a}, [a, n, m](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < n; ++i) {
      const double* gr = g.data() + static_cast<size_t>(i) * m;
      const double* yr = y.data() + static_cast<size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += gr[j] * yr[j];
      double* dst = ga.data() + static_cast<size_t>(i) * m;
      for (int j = 0; j < m; ++j) dst[j] += yr[j] * (gr[j] - dot);
    }
  });
}

NodeId Tape::log_softmax_rows(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 2) throw DimensionError("log_softmax_rows: need [N,M], got " + shape_to_string(v.shape()));
  const int n = v.dim(0), m = v.dim(1);
  Tensor out = v;
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * m;
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < m; ++j) row[j] -= lse;
  }
  return push(std::move(out), {a}, [a, n, m](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<size_t>(self)];
    const Tensor& y = t.value(self);  // log p
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < n; ++i) {
      const double* gr = g.data() + static_cast<size_t>(i) * m;
      const double* yr = y.data() + static_cast<size_t>(i) * m;
      double gsum = 0.0;
      for (int j = 0; j < m; ++j) gsum += gr[j];
      double* dst = ga.data() + static_cast<size_t>(i) * m;
      for (int j = 0; j < m; ++j) dst[j] += gr[j] - std::exp(yr[j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

NodeId Tape::batch_norm(NodeId x, NodeId gamma, NodeId beta, RunningStats stats, double eps,
                        double momentum, NetMode mode) {
  const Tensor& v = value(x);
  if (v.rank() != 2 && v.rank() != 4) {
    throw DimensionError("batch_norm: need [B,C] or [B,C,H,W], got " + shape_to_string(v.shape()));
  }
  const int b = v.dim(0), c = v.dim(1);
  const int spatial = v.rank() == 4 ? v.dim(2) * v.dim(3) : 1;
  if (value(gamma).size() != c || value(beta).size() != c) {
    throw DimensionError("batch_norm: gamma/beta must be [C=" + std::to_string(c) + "]");
  }
  if (mode == NetMode::kTrain && b < 2) {
    throw ContractError("batch_norm: degenerate batch B=" + std::to_string(b) +
                        " in train mode (need B >= 2)");
  }
  const std::int64_t reduce_n = static_cast<std::int64_t>(b) * spatial;

  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);

  if (mode == NetMode::kTrain) {
    for (int ch = 0; ch < c; ++ch) {
      double m = 0.0;
      for (int bb = 0; bb < b; ++bb) {
        const double* src = v.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
        for (int s = 0; s < spatial; ++s) m += src[s];
      }
      m /= static_cast<double>(reduce_n);
      double var = 0.0;
      for (int bb = 0; bb < b; ++bb) {
        const double* src = v.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
        for (int s = 0; s < spatial; ++s) {
          const double dd = src[s] - m;
          var += dd * dd;
        }
      }
      var /= static_cast<double>(reduce_n);
      (*mean)[static_cast<size_t>(ch)] = m;
      (*inv_std)[static_cast<size_t>(ch)] = 1.0 / std::sqrt(var + eps);
      if (stats.mean != nullptr) {
        (*stats.mean)[ch] = (1.0 - momentum) * (*stats.mean)[ch] + momentum * m;
        (*stats.var)[ch] = (1.0 - momentum) * (*stats.var)[ch] + momentum * var;
      }
    }
  } else {
    if (stats.mean == nullptr || stats.var == nullptr) {
      throw ContractError("batch_norm: eval mode requires running stats");
    }
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[static_cast<size_t>(ch)] = (*stats.mean)[ch];
      (*inv_std)[static_cast<size_t>(ch)] = 1.0 / std::sqrt((*stats.var)[ch] + eps);
    }
  }

  Tensor out(v.shape());
  const double* pg = value(gamma).data();
  const double* pb = value(beta).data();
  for (int bb = 0; bb < b; ++bb) {
    for (int ch = 0; ch < c; ++ch) {
      const double* src = v.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
      double* dst = out.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
      const double m = (*mean)[static_cast<size_t>(ch)];
      const double is = (*inv_std)[static_cast<size_t>(ch)];
      for (int s = 0; s < spatial; ++s) dst[s] = (src[s] - m) * is * pg[ch] + pb[ch];
    }
  }

  const bool train = mode == NetMode::kTrain;
  return push(std::move(out), {x, gamma, beta},
              [x, gamma, beta, b, c, spatial, reduce_n, mean, inv_std, train](Tape& t,
                                                                              NodeId self) {
                const Tensor& g = t.grads_[static_cast<size_t>(self)];
                const Tensor& vx = t.value(x);
                const double* pgamma = t.value(gamma).data();
                Tensor& gx = t.grad_buf(x);
                Tensor& ggamma = t.grad_buf(gamma);
                Tensor& gbeta = t.grad_buf(beta);
                for (int ch = 0; ch < c; ++ch) {
                  const double m = (*mean)[static_cast<size_t>(ch)];
                  const double is = (*inv_std)[static_cast<size_t>(ch)];
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (int bb = 0; bb < b; ++bb) {
                    const double* gr = g.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                    const double* xr = vx.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                    for (int s = 0; s < spatial; ++s) {
                      sum_g += gr[s];
                      sum_gx += gr[s] * (xr[s] - m) * is;
                    }
                  }
                  ggamma[ch] += sum_gx;
                  gbeta[ch] += sum_g;
                  const double gam = pgamma[ch];
                  if (train) {
                    const double inv_n = 1.0 / static_cast<double>(reduce_n);
                    for (int bb = 0; bb < b; ++bb) {
                      const double* gr = g.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                      const double* xr = vx.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                      double* dst = gx.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                      for (int s = 0; s < spatial; ++s) {
                        const double xhat = (xr[s] - m) * is;
                        dst[s] += gam * is * (gr[s] - inv_n * (sum_g + xhat * sum_gx));
                      }
                    }
                  } else {
                    for (int bb = 0; bb < b; ++bb) {
                      const double* gr = g.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                      double* dst = gx.data() + (static_cast<size_t>(bb) * c + ch) * spatial;
                      for (int s = 0; s < spatial; ++s) dst[s] += gam * is * gr[s];
                    }
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

NodeId Tape::sum(NodeId a) {
  const Tensor& v = value(a);
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) acc += v[i];
  return push(Tensor::scalar(acc), {a}, [a](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<size_t>(self)][0];
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

NodeId Tape::mean(NodeId a) {
  const Tensor& v = value(a);
  if (v.size() == 0) throw ContractError("mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(v.size());
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) acc += v[i];
  return push(Tensor::scalar(acc * inv), {a}, [a, inv](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<size_t>(self)][0] * inv;
    Tensor& ga = t.grad_buf(a);
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

NodeId Tape::neg_mean_diag(NodeId a) {
  const Tensor& v = value(a);
  if (v.rank() != 2 || v.dim(0) != v.dim(1)) {
    throw DimensionError("neg_mean_diag: need square [N,N], got " + shape_to_string(v.shape()));
  }
  const int n = v.dim(0);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += v[static_cast<std::int64_t>(i) * n + i];
  return push(Tensor::scalar(-acc / n), {a}, [a, n](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<size_t>(self)][0];
    Tensor& ga = t.grad_buf(a);
    for (int i = 0; i < n; ++i) ga[static_cast<std::int64_t>(i) * n + i] -= g / n;
  });
}

NodeId Tape::mse(NodeId pred, Tensor target) {
  const Tensor& v = value(pred);
  require_same_shape(v, target, "mse");
  if (v.size() == 0) throw ContractError("mse of empty tensors");
  const double inv = 1.0 / static_cast<double>(v.size());
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) {
    const double d = v[i] - target[i];
    acc += d * d;
  }
  auto tgt = std::make_shared<Tensor>(std::move(target));
  return push(Tensor::scalar(acc * inv), {pred}, [pred, tgt, inv](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<size_t>(self)][0];
    const Tensor& v = t.value(pred);
    Tensor& gp = t.grad_buf(pred);
    for (std::int64_t i = 0; i < v.size(); ++i) {
      gp[i] += g * 2.0 * (v[i] - (*tgt)[i]) * inv;
    }
  });
}

NodeId Tape::bce(NodeId pred, Tensor target, Tensor weight) {
  const Tensor& v = value(pred);
  require_same_shape(v, target, "bce");
  require_same_shape(v, weight, "bce weight");
  constexpr double kEps = 1e-6;
  double wsum = 0.0;
  for (std::int64_t i = 0; i < weight.size(); ++i) wsum += weight[i];
  if (!(wsum > 0.0)) throw ContractError("bce: no visible elements (weight mass is zero)");
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) {
    if (weight[i] == 0.0) continue;
    const double m = std::min(1.0 - kEps, std::max(kEps, v[i]));
    acc -= weight[i] * (target[i] * std::log(m) + (1.0 - target[i]) * std::log(1.0 - m));
  }
  auto tgt = std::make_shared<Tensor>(std::move(target));
  auto wgt = std::make_shared<Tensor>(std::move(weight));
  const double inv = 1.0 / wsum;
  return push(Tensor::scalar(acc * inv), {pred}, [pred, tgt, wgt, inv](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<size_t>(self)][0];
    const Tensor& v = t.value(pred);
    Tensor& gp = t.grad_buf(pred);
    for (std::int64_t i = 0; i < v.size(); ++i) {
      const double w = (*wgt)[i];
      if (w == 0.0) continue;
      if (v[i] <= kEps || v[i] >= 1.0 - kEps) continue;  // clamped flat region
      gp[i] += g * inv * w * (-((*tgt)[i] / v[i]) + (1.0 - (*tgt)[i]) / (1.0 - v[i]));
    }
  });
}

}  // namespace avsdiff
