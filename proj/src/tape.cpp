#include "advseg/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "advseg/errors.hpp"

namespace advseg {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

constexpr double kLogClamp = 1e-12;

struct ConvGeometry {
  std::size_t h, w, cin, k, cout, stride, pad, oh, ow;
};

// Unfolds input patches into rows ordered (ky, kx, ci), matching the
// row-major layout of a k x k x Cin x Cout kernel viewed as (k*k*Cin) x Cout.
void im2col(const ConvGeometry& g, const double* in, double* cols) {
  const std::size_t row_len = g.k * g.k * g.cin;
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      double* row = cols + (oy * g.ow + ox) * row_len;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + (ky * g.k + kx) * g.cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
              ix >= static_cast<std::ptrdiff_t>(g.w)) {
            std::fill(dst, dst + g.cin, 0.0);
          } else {
            const double* src = in + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
            std::copy(src, src + g.cin, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* in_grad) {
  const std::size_t row_len = g.k * g.k * g.cin;
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const double* row = cols + (oy * g.ow + ox) * row_len;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const double* src = row + (ky * g.k + kx) * g.cin;
          double* dst = in_grad + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad,
               std::function<void(Tape&, std::size_t)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

Var Tape::conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t padding) {
  const Tensor& x = value(input);
  const Tensor& kt = value(kernels);
  const Tensor& bt = value(bias);
  if (x.rank() != 3 || kt.rank() != 4 || kt.dim(0) != kt.dim(1) || kt.dim(2) != x.dim(2)) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " incompatible with kernels " +
                     shape_string(kt.shape()));
  }
  if (bt.rank() != 1 || bt.dim(0) != kt.dim(3)) {
    throw ShapeError("conv2d: bias " + shape_string(bt.shape()) + " incompatible with kernels " +
                     shape_string(kt.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), kt.dim(0), kt.dim(3), stride, padding, 0, 0};
  if (g.k > g.h + 2 * g.pad || g.k > g.w + 2 * g.pad) {
    throw ShapeError("conv2d: kernels " + shape_string(kt.shape()) + " larger than padded input " +
                     shape_string(x.shape()));
  }
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t rows = g.oh * g.ow;
  const std::size_t row_len = g.k * g.k * g.cin;

  auto cols = std::make_shared<std::vector<double>>(rows * row_len);
  im2col(g, x.data(), cols->data());

  Tensor out({g.oh, g.ow, g.cout});
  MatrixMap out_m(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(g.cout));
  ConstMatrixMap cols_m(cols->data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(row_len));
  ConstMatrixMap k_m(kt.data(), static_cast<Eigen::Index>(row_len), static_cast<Eigen::Index>(g.cout));
  out_m.noalias() = cols_m * k_m;
  Eigen::Map<const Eigen::RowVectorXd> b_v(bt.data(), static_cast<Eigen::Index>(g.cout));
  out_m.rowwise() += b_v;

  const bool rg = requires_grad(input) || requires_grad(kernels) || requires_grad(bias);
  const std::size_t in_id = input.id, k_id = kernels.id, b_id = bias.id;
  return push(std::move(out), rg, [g, cols, in_id, k_id, b_id, rows, row_len](Tape& t, std::size_t self) {
    ConstMatrixMap dout(t.incoming(self).data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(g.cout));
    if (t.nodes_[k_id].requires_grad) {
      ConstMatrixMap cols_m(cols->data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(row_len));
      MatrixMap dk(t.grad_buffer(k_id).data(), static_cast<Eigen::Index>(row_len),
                   static_cast<Eigen::Index>(g.cout));
      dk.noalias() += cols_m.transpose() * dout;
    }
    if (t.nodes_[b_id].requires_grad) {
      Tensor& db = t.grad_buffer(b_id);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < g.cout; ++c) db[c] += dout(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      }
    }
    if (t.nodes_[in_id].requires_grad) {
      ConstMatrixMap k_m(t.nodes_[k_id].value.data(), static_cast<Eigen::Index>(row_len),
                         static_cast<Eigen::Index>(g.cout));
      RowMatrix dcols = dout * k_m.transpose();
      col2im_add(g, dcols.data(), t.grad_buffer(in_id).data());
    }
  });
}

Var Tape::relu(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t in_id = x.id;
  return push(std::move(out), requires_grad(x), [in_id](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& xin = t.nodes_[in_id].value;
    Tensor& dx = t.grad_buffer(in_id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xin[i] > 0.0) dx[i] += g[i];
    }
  });
}

Var Tape::pixel_softmax(Var logits) {
  const Tensor& l = value(logits);
  if (l.rank() != 3 || l.dim(2) < 2) {
    throw ShapeError("pixel_softmax: expected H x W x |C| with |C| >= 2, got " + shape_string(l.shape()));
  }
  const std::size_t c = l.dim(2);
  const std::size_t npix = l.dim(0) * l.dim(1);
  Tensor out(l.shape());
  for (std::size_t z = 0; z < npix; ++z) {
    const double* in = l.data() + z * c;
    double* o = out.data() + z * c;
    const double m = *std::max_element(in, in + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      o[k] = std::exp(in[k] - m);
      s += o[k];
    }
    for (std::size_t k = 0; k < c; ++k) o[k] /= s;
  }
  const std::size_t in_id = logits.id;
  Var v = push(std::move(out), requires_grad(logits), [in_id, c, npix](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& p = t.nodes_[self].value;
    Tensor& dl = t.grad_buffer(in_id);
    for (std::size_t z = 0; z < npix; ++z) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += p[z * c + k] * g[z * c + k];
      for (std::size_t k = 0; k < c; ++k) dl[z * c + k] += p[z * c + k] * (g[z * c + k] - dot);
    }
  });
  nodes_[v.id].softmax_of = static_cast<std::ptrdiff_t>(in_id);
  return v;
}

Var Tape::cross_entropy(Var probs, const LabelMap& labels, const std::vector<unsigned char>* mask) {
  const Tensor& p = value(probs);
  if (p.rank() != 3 || p.dim(0) != labels.height() || p.dim(1) != labels.width()) {
    throw ShapeError("cross_entropy: probs " + shape_string(p.shape()) + " vs labels " +
                     shape_string({labels.height(), labels.width()}));
  }
  const std::size_t c = p.dim(2);
  const std::size_t npix = labels.size();
  if (mask && mask->size() != npix) throw ShapeError("cross_entropy: mask size mismatch");
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t z = 0; z < npix; ++z) {
    const int y = labels[z];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    if (mask && !(*mask)[z]) continue;
    total += -std::log(std::max(p[z * c + static_cast<std::size_t>(y)], kLogClamp));
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  std::vector<unsigned char> active = mask ? *mask : std::vector<unsigned char>(npix, 1);
  std::vector<int> ids(labels.ids().begin(), labels.ids().end());
  const std::size_t p_id = probs.id;
  return push(Tensor::scalar(loss), requires_grad(probs),
              [p_id, c, npix, count, active = std::move(active), ids = std::move(ids)](Tape& t, std::size_t self) {
                if (count == 0) return;
                const double g = t.incoming(self)[0] / static_cast<double>(count);
                const Tensor& pv = t.nodes_[p_id].value;
                const std::ptrdiff_t logits = t.nodes_[p_id].softmax_of;
                if (logits >= 0) {
                  // d(-log softmax_y)/d logits = p - onehot(y)
                  Tensor& dl = t.grad_buffer(static_cast<std::size_t>(logits));
                  for (std::size_t z = 0; z < npix; ++z) {
                    if (!active[z]) continue;
                    for (std::size_t k = 0; k < c; ++k) dl[z * c + k] += g * pv[z * c + k];
                    dl[z * c + static_cast<std::size_t>(ids[z])] -= g;
                  }
                  return;
                }
                Tensor& dp = t.grad_buffer(p_id);
                for (std::size_t z = 0; z < npix; ++z) {
                  if (!active[z]) continue;
                  const std::size_t i = z * c + static_cast<std::size_t>(ids[z]);
                  if (pv[i] > kLogClamp) dp[i] -= g / pv[i];
                }
              });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Tensor out = value(a);
  const Tensor& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t a_id = a.id, b_id = b.id;
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a_id, b_id](Tape& t, std::size_t self) {
    for (std::size_t id : {a_id, b_id}) {
      if (!t.nodes_[id].requires_grad) continue;
      const Tensor& g = t.incoming(self);
      Tensor& d = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  Tensor out = value(a);
  const Tensor& bv = value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t a_id = a.id, b_id = b.id;
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a_id, b_id](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    if (t.nodes_[a_id].requires_grad) {
      const Tensor& other = t.nodes_[b_id].value;
      Tensor& d = t.grad_buffer(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
    if (t.nodes_[b_id].requires_grad) {
      const Tensor& other = t.nodes_[a_id].value;
      Tensor& d = t.grad_buffer(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

Var Tape::scale(Var x, double factor) {
  Tensor out = value(x);
  for (auto& v : out.values()) v *= factor;
  const std::size_t in_id = x.id;
  return push(std::move(out), requires_grad(x), [in_id, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    Tensor& d = t.grad_buffer(in_id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

Var Tape::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  const std::size_t in_id = x.id;
  return push(Tensor::scalar(s), requires_grad(x), [in_id](Tape& t, std::size_t self) {
    const double g = t.incoming(self)[0];
    Tensor& d = t.grad_buffer(in_id);
    for (auto& v : d.values()) v += g;
  });
}

Var Tape::global_avg_pool(Var x) {
  const Tensor& xv = value(x);
  if (xv.rank() != 3) throw ShapeError("global_avg_pool: expected H x W x C, got " + shape_string(xv.shape()));
  const std::size_t c = xv.dim(2);
  const std::size_t npix = xv.dim(0) * xv.dim(1);
  Tensor out({c});
  for (std::size_t z = 0; z < npix; ++z) {
    for (std::size_t k = 0; k < c; ++k) out[k] += xv[z * c + k];
  }
  for (auto& v : out.values()) v /= static_cast<double>(npix);
  const std::size_t in_id = x.id;
  return push(std::move(out), requires_grad(x), [in_id, c, npix](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    Tensor& d = t.grad_buffer(in_id);
    const double inv = 1.0 / static_cast<double>(npix);
    for (std::size_t z = 0; z < npix; ++z) {
      for (std::size_t k = 0; k < c; ++k) d[z * c + k] += g[k] * inv;
    }
  });
}

Var Tape::dense(Var x, Var weights, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& w = value(weights);
  const Tensor& b = value(bias);
  if (xv.rank() != 1 || w.rank() != 2 || w.dim(0) != xv.dim(0) || b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw ShapeError("dense: input " + shape_string(xv.shape()) + " incompatible with weights " +
                     shape_string(w.shape()) + " / bias " + shape_string(b.shape()));
  }
  const std::size_t n = w.dim(0), m = w.dim(1);
  Tensor out = b;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j] += xv[i] * w[i * m + j];
  }
  const std::size_t x_id = x.id, w_id = weights.id, b_id = bias.id;
  const bool rg = requires_grad(x) || requires_grad(weights) || requires_grad(bias);
  return push(std::move(out), rg, [x_id, w_id, b_id, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    if (t.nodes_[x_id].requires_grad) {
      const Tensor& wv = t.nodes_[w_id].value;
      Tensor& dx = t.grad_buffer(x_id);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) dx[i] += g[j] * wv[i * m + j];
      }
    }
    if (t.nodes_[w_id].requires_grad) {
      const Tensor& xin = t.nodes_[x_id].value;
      Tensor& dw = t.grad_buffer(w_id);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) dw[i * m + j] += xin[i] * g[j];
      }
    }
    if (t.nodes_[b_id].requires_grad) {
      Tensor& db = t.grad_buffer(b_id);
      for (std::size_t j = 0; j < m; ++j) db[j] += g[j];
    }
  });
}

Var Tape::sigmoid(Var x) {
  Tensor out = value(x);
  for (auto& v : out.values()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const std::size_t in_id = x.id;
  return push(std::move(out), requires_grad(x), [in_id](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& s = t.nodes_[self].value;
    Tensor& d = t.grad_buffer(in_id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Var Tape::bce_with_logit(Var logit, double target) {
  const Tensor& z = value(logit);
  if (z.size() != 1) throw ShapeError("bce_with_logit: expected a scalar logit, got " + shape_string(z.shape()));
  const double v = z[0];
  const double softplus = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  const std::size_t in_id = logit.id;
  return push(Tensor::scalar(softplus - target * v), requires_grad(logit), [in_id, v, target](Tape& t, std::size_t self) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    t.grad_buffer(in_id)[0] += t.incoming(self)[0] * (s - target);
  });
}

void Tape::backward(Var loss) {
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(root.value.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
}

}  // namespace advseg
