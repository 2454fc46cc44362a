#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records primitive applications in execution order (define-by-run),
// so operands always precede their consumers and a single reverse sweep in
// backward() visits each node exactly once. Var handles index into the tape.
// Gradients accumulate: a value consumed twice receives both contributions.
// Leaves created from a ParameterStore entry keep a binding so their
// accumulated gradient can be flushed back into the store, scaled, in a
// deterministic order chosen by the caller (flush_param_grads).
//
// Backward work is skipped for subgraphs no gradient-requiring leaf feeds
// into; frozen parameters therefore cost nothing beyond the forward pass.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "protolab/params.hpp"
#include "protolab/tensor.hpp"

namespace protolab {

enum class DistanceMode { squared, euclidean };

inline const char* to_string(DistanceMode m) {
  return m == DistanceMode::squared ? "squared" : "euclidean";
}

// latent grid coordinates
struct Cell {
  std::size_t i = 0, j = 0;
  bool operator==(const Cell&) const = default;
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// C(m,n) = or += A(m,k) * B(k,n), all row-major
inline void gemm(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate) {
  CMapMat A(a, m, k), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C(m,n) = or += A(k,m)^T * B(k,n)
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  CMapMat A(a, k, m), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

// C(m,n) = or += A(m,k) * B(n,k)^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  CMapMat A(a, m, k), B(b, n, k);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace detail

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first touch
    bool requires_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&, Node&)> backprop;  // empty for leaves
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear() { nodes_.clear(); }
  std::size_t node_count() const { return nodes_.size(); }

  const Tensor& value(Var v) const { return node(v).value; }

  // Zero tensor if the node never received a gradient.
  const Tensor& grad(Var v) const {
    Node& n = const_cast<Node&>(node(v));
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  // ---- leaves ----

  Var leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var param(Parameter& p, bool force_grad = false) {
    Node n;
    n.value = p.value;
    n.requires_grad = force_grad || p.trainable;
    n.bound = &p;
    return push(std::move(n));
  }

  // ---- backward ----

  // Accumulates d(root)/d(leaf) into every gradient-requiring node, seeded
  // with `seed` at the root. Deterministic given an identical tape.
  void backward(Var root, double seed = 1.0) {
    PROTOLAB_REQUIRE(value(root).size() == 1,
                     "backward: root must be scalar, got shape ",
                     shape_str(value(root)));
    Node& rn = node(root);
    if (!rn.requires_grad) return;
    grad_buf(rn)[0] += seed;
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this, n);
    }
  }

  // Adds scale * (accumulated leaf gradient) into the bound store entries.
  void flush_param_grads(double scale = 1.0) {
    for (auto& n : nodes_) {
      if (!n.bound || n.grad.size() == 0) continue;
      Tensor& g = n.bound->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * n.grad[i];
    }
  }

  // ---- primitives ----

  // Cross-correlation. input [Cin,H,W], kernel [Cout,Cin,kh,kw], optional
  // bias [Cout]. Output [Cout,H',W'] with H' = (H + 2p - kh)/stride + 1.
  Var conv2d(Var input, Var kernel, Var bias, std::size_t stride,
             std::size_t padding) {
    const Tensor& x = value(input);
    const Tensor& k = value(kernel);
    PROTOLAB_REQUIRE(x.rank() == 3 && k.rank() == 4,
                     "conv2d: need input rank 3 and kernel rank 4, got ",
                     shape_str(x), " and ", shape_str(k));
    PROTOLAB_REQUIRE(x.extent(0) == k.extent(1),
                     "conv2d: channel mismatch between input ", shape_str(x),
                     " and kernel ", shape_str(k));
    PROTOLAB_REQUIRE(stride >= 1, "conv2d: stride must be >= 1");
    const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t co = k.extent(0), kh = k.extent(2), kw = k.extent(3);
    const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;
    PROTOLAB_REQUIRE(kh <= hp && kw <= wp, "conv2d: kernel ", shape_str(k),
                     " exceeds padded input ", shape_str(x), " with padding ",
                     padding);
    if (bias.valid()) {
      const Tensor& b = value(bias);
      PROTOLAB_REQUIRE(b.rank() == 1 && b.extent(0) == co,
                       "conv2d: bias shape ", shape_str(b),
                       " does not match kernel ", shape_str(k));
    }
    const std::size_t ho = (hp - kh) / stride + 1, wo = (wp - kw) / stride + 1;
    const std::size_t n = ho * wo, k2 = ci * kh * kw;

    struct Ctx {
      Tensor col;  // [k2, n]
      std::size_t stride, padding;
    };
    auto ctx = std::make_shared<Ctx>();
    ctx->stride = stride;
    ctx->padding = padding;
    ctx->col = Tensor({k2, n});
    im2col(x, kh, kw, stride, padding, ho, wo, ctx->col);

    Tensor out({co, ho, wo});
    detail::gemm(k.data(), ctx->col.data(), out.data(), co, k2, n, false);
    if (bias.valid()) {
      const Tensor& b = value(bias);
      for (std::size_t c = 0; c < co; ++c) {
        double* row = out.data() + c * n;
        for (std::size_t i = 0; i < n; ++i) row[i] += b[c];
      }
    }

    return make_op(std::move(out), {input, kernel, bias},
                   [input, kernel, bias, ctx, ci, h, w, co, kh, kw, ho, wo, n,
                    k2](Tape& t, Node& self) {
                     const double* dy = self.grad.data();
                     if (t.needs_grad(kernel)) {
                       detail::gemm_nt(dy, ctx->col.data(),
                                       t.grad_of(kernel).data(), co, n, k2,
                                       true);
                     }
                     if (bias.valid() && t.needs_grad(bias)) {
                       Tensor& db = t.grad_of(bias);
                       for (std::size_t c = 0; c < co; ++c) {
                         double s = 0.0;
                         const double* row = dy + c * n;
                         for (std::size_t i = 0; i < n; ++i) s += row[i];
                         db[c] += s;
                       }
                     }
                     if (t.needs_grad(input)) {
                       Tensor dcol({k2, n});
                       detail::gemm_tn(t.value(kernel).data(), dy, dcol.data(),
                                       k2, co, n, false);
                       col2im_add(dcol, ci, h, w, kh, kw, ctx->stride,
                                  ctx->padding, ho, wo, t.grad_of(input));
                     }
                   });
  }

  // Max over window x window patches; backward routes to the argmax cell,
  // first in row-major order on ties.
  Var maxpool2d(Var input, std::size_t window, std::size_t stride) {
    const Tensor& x = value(input);
    PROTOLAB_REQUIRE(x.rank() == 3, "maxpool2d: need rank 3, got ",
                     shape_str(x));
    PROTOLAB_REQUIRE(window >= 1 && stride >= 1,
                     "maxpool2d: window and stride must be >= 1");
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    PROTOLAB_REQUIRE(window <= h && window <= w, "maxpool2d: window ", window,
                     " larger than input ", shape_str(x));
    const std::size_t ho = (h - window) / stride + 1;
    const std::size_t wo = (w - window) / stride + 1;

    auto arg = std::make_shared<std::vector<std::uint32_t>>(c * ho * wo);
    Tensor out({c, ho, wo});
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = x.data() + ch * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::uint32_t best_at = 0;
          for (std::size_t u = 0; u < window; ++u) {
            const std::size_t iy = oy * stride + u;
            for (std::size_t v = 0; v < window; ++v) {
              const std::size_t ix = ox * stride + v;
              const double val = plane[iy * w + ix];
              if (val > best) {
                best = val;
                best_at = static_cast<std::uint32_t>(iy * w + ix);
              }
            }
          }
          const std::size_t o = (ch * ho + oy) * wo + ox;
          out[o] = best;
          (*arg)[o] = best_at;
        }
      }
    }
    return make_op(std::move(out), {input},
                   [input, arg, h, w](Tape& t, Node& self) {
                     if (!t.needs_grad(input)) return;
                     Tensor& dx = t.grad_of(input);
                     const std::size_t planes = self.grad.size() /
                                                (self.value.extent(1) *
                                                 self.value.extent(2));
                     const std::size_t per = self.value.extent(1) *
                                             self.value.extent(2);
                     for (std::size_t ch = 0; ch < planes; ++ch)
                       for (std::size_t o = 0; o < per; ++o)
                         dx[ch * h * w + (*arg)[ch * per + o]] +=
                             self.grad[ch * per + o];
                   });
  }

  // relu gradient at exactly 0 is 0
  Var relu(Var input) {
    const Tensor& x = value(input);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return make_op(std::move(out), {input}, [input](Tape& t, Node& self) {
      if (!t.needs_grad(input)) return;
      Tensor& dx = t.grad_of(input);
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (self.value[i] > 0.0) dx[i] += self.grad[i];
    });
  }

  Var sigmoid(Var input) {
    const Tensor& x = value(input);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = detail::stable_sigmoid(x[i]);
    return make_op(std::move(out), {input}, [input](Tape& t, Node& self) {
      if (!t.needs_grad(input)) return;
      Tensor& dx = t.grad_of(input);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const double y = self.value[i];
        dx[i] += self.grad[i] * y * (1.0 - y);
      }
    });
  }

  // y = W x (+ b); x [n], W [k,n], b [k]
  Var dense(Var input, Var weights, Var bias) {
    const Tensor& x = value(input);
    const Tensor& wm = value(weights);
    PROTOLAB_REQUIRE(x.rank() == 1 && wm.rank() == 2 &&
                         wm.extent(1) == x.extent(0),
                     "dense: weights ", shape_str(wm),
                     " incompatible with input ", shape_str(x));
    const std::size_t k = wm.extent(0), n = wm.extent(1);
    if (bias.valid()) {
      const Tensor& b = value(bias);
      PROTOLAB_REQUIRE(b.rank() == 1 && b.extent(0) == k, "dense: bias ",
                       shape_str(b), " incompatible with weights ",
                       shape_str(wm));
    }
    Tensor out({k});
    detail::gemm(wm.data(), x.data(), out.data(), k, n, 1, false);
    if (bias.valid())
      for (std::size_t i = 0; i < k; ++i) out[i] += value(bias)[i];

    return make_op(std::move(out), {input, weights, bias},
                   [input, weights, bias, k, n](Tape& t, Node& self) {
                     const double* dy = self.grad.data();
                     if (t.needs_grad(weights)) {
                       // dW += dy x^T
                       detail::gemm(dy, t.value(input).data(),
                                    t.grad_of(weights).data(), k, 1, n, true);
                     }
                     if (bias.valid() && t.needs_grad(bias)) {
                       Tensor& db = t.grad_of(bias);
                       for (std::size_t i = 0; i < k; ++i) db[i] += dy[i];
                     }
                     if (t.needs_grad(input)) {
                       detail::gemm_tn(t.value(weights).data(), dy,
                                       t.grad_of(input).data(), n, k, 1, true);
                     }
                   });
  }

  // -log softmax(logits)[label], max-subtracted for stability
  Var softmax_cross_entropy(Var logits, std::size_t label) {
    const Tensor& z = value(logits);
    PROTOLAB_REQUIRE(z.rank() == 1, "softmax_cross_entropy: need rank 1, got ",
                     shape_str(z));
    PROTOLAB_REQUIRE(label < z.extent(0), "softmax_cross_entropy: label ",
                     label, " out of range for ", shape_str(z));
    const std::size_t k = z.extent(0);
    double m = z[0];
    for (std::size_t i = 1; i < k; ++i) m = std::max(m, z[i]);
    auto probs = std::make_shared<std::vector<double>>(k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      (*probs)[i] = std::exp(z[i] - m);
      sum += (*probs)[i];
    }
    for (std::size_t i = 0; i < k; ++i) (*probs)[i] /= sum;
    const double loss = std::log(sum) - (z[label] - m);
    return make_op(Tensor::scalar(loss), {logits},
                   [logits, probs, label](Tape& t, Node& self) {
                     if (!t.needs_grad(logits)) return;
                     const double g = self.grad[0];
                     Tensor& dz = t.grad_of(logits);
                     for (std::size_t i = 0; i < dz.size(); ++i)
                       dz[i] += g * ((*probs)[i] - (i == label ? 1.0 : 0.0));
                   });
  }

  // Distance term between every latent pixel and every prototype.
  // latent [D,h,w], prototypes [m,D] -> [m,h,w]; squared L2 or its sqrt.
  // The sqrt derivative at zero distance is defined as 0.
  Var prototype_distances(Var latent, Var prototypes, DistanceMode mode) {
    const Tensor& z = value(latent);
    const Tensor& p = value(prototypes);
    PROTOLAB_REQUIRE(z.rank() == 3 && p.rank() == 2 &&
                         z.extent(0) == p.extent(1),
                     "prototype_distances: latent ", shape_str(z),
                     " and prototypes ", shape_str(p), " disagree on depth");
    const std::size_t d = z.extent(0), h = z.extent(1), w = z.extent(2);
    const std::size_t m = p.extent(0), n = h * w;

    Tensor out({m, h, w});
    // ||p||^2 + ||z||^2 - 2 p.z
    detail::gemm(p.data(), z.data(), out.data(), m, d, n, false);
    std::vector<double> znorm(n, 0.0), pnorm(m, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      const double* row = z.data() + c * n;
      for (std::size_t j = 0; j < n; ++j) znorm[j] += row[j] * row[j];
    }
    for (std::size_t l = 0; l < m; ++l) {
      const double* row = p.data() + l * d;
      for (std::size_t c = 0; c < d; ++c) pnorm[l] += row[c] * row[c];
    }
    for (std::size_t l = 0; l < m; ++l) {
      double* row = out.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) {
        double sq = pnorm[l] + znorm[j] - 2.0 * row[j];
        if (sq < 0.0) sq = 0.0;  // numeric guard
        row[j] = mode == DistanceMode::squared ? sq : std::sqrt(sq);
      }
    }

    return make_op(
        std::move(out), {latent, prototypes},
        [latent, prototypes, mode, d, m, n](Tape& t, Node& self) {
          const bool need_z = t.needs_grad(latent);
          const bool need_p = t.needs_grad(prototypes);
          if (!need_z && !need_p) return;
          // chain through sqrt for the euclidean mode
          Tensor gt(self.grad.shape());
          if (mode == DistanceMode::squared) {
            for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = self.grad[i];
          } else {
            for (std::size_t i = 0; i < gt.size(); ++i) {
              const double dist = self.value[i];
              gt[i] = dist > 0.0 ? self.grad[i] / (2.0 * dist) : 0.0;
            }
          }
          const Tensor& z = t.value(latent);
          const Tensor& p = t.value(prototypes);
          if (need_z) {
            Tensor& dz = t.grad_of(latent);
            std::vector<double> colsum(n, 0.0);
            for (std::size_t l = 0; l < m; ++l) {
              const double* row = gt.data() + l * n;
              for (std::size_t j = 0; j < n; ++j) colsum[j] += row[j];
            }
            Tensor pg({d, n});
            detail::gemm_tn(p.data(), gt.data(), pg.data(), d, m, n, false);
            for (std::size_t c = 0; c < d; ++c)
              for (std::size_t j = 0; j < n; ++j)
                dz[c * n + j] +=
                    2.0 * (z[c * n + j] * colsum[j] - pg[c * n + j]);
          }
          if (need_p) {
            Tensor& dp = t.grad_of(prototypes);
            Tensor gz({m, d});
            detail::gemm_nt(gt.data(), z.data(), gz.data(), m, n, d, false);
            for (std::size_t l = 0; l < m; ++l) {
              double rowsum = 0.0;
              const double* row = gt.data() + l * n;
              for (std::size_t j = 0; j < n; ++j) rowsum += row[j];
              for (std::size_t c = 0; c < d; ++c)
                dp[l * d + c] +=
                    2.0 * (p[l * d + c] * rowsum - gz[l * d + c]);
            }
          }
        });
  }

  // Elementwise log((d+1)/(d+eps)); the similarity transform applied to a
  // tensor of non-negative distance terms.
  Var log_ratio_similarity(Var distances, double epsilon_stab) {
    PROTOLAB_REQUIRE(epsilon_stab > 0.0 && epsilon_stab < 1.0,
                     "log_ratio_similarity: epsilon_stab must be in (0,1), got ",
                     epsilon_stab);
    const Tensor& x = value(distances);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      PROTOLAB_REQUIRE(x[i] >= 0.0,
                       "log_ratio_similarity: negative distance ", x[i]);
      out[i] = std::log1p(x[i]) - std::log(x[i] + epsilon_stab);
    }
    return make_op(std::move(out), {distances},
                   [distances, epsilon_stab](Tape& t, Node& self) {
                     if (!t.needs_grad(distances)) return;
                     const Tensor& x = t.value(distances);
                     Tensor& dx = t.grad_of(distances);
                     for (std::size_t i = 0; i < dx.size(); ++i)
                       dx[i] += self.grad[i] * (1.0 / (x[i] + 1.0) -
                                                1.0 / (x[i] + epsilon_stab));
                   });
  }

  // Per-prototype spatial max. maps [m,h,w] -> [m]; the argmax cell (first
  // in row-major order on ties) is recorded and queryable via argmax_cells.
  Var spatial_max(Var maps) {
    const Tensor& x = value(maps);
    PROTOLAB_REQUIRE(x.rank() == 3, "spatial_max: need rank 3, got ",
                     shape_str(x));
    const std::size_t m = x.extent(0), n = x.extent(1) * x.extent(2);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(m);
    Tensor out({m});
    for (std::size_t l = 0; l < m; ++l) {
      const double* row = x.data() + l * n;
      double best = row[0];
      std::uint32_t at = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (row[j] > best) {
          best = row[j];
          at = static_cast<std::uint32_t>(j);
        }
      out[l] = best;
      (*arg)[l] = at;
    }
    Var v = make_op(std::move(out), {maps},
                    [maps, arg, n](Tape& t, Node& self) {
                      if (!t.needs_grad(maps)) return;
                      Tensor& dx = t.grad_of(maps);
                      for (std::size_t l = 0; l < self.grad.size(); ++l)
                        dx[l * n + (*arg)[l]] += self.grad[l];
                    });
    argmax_[v.id] = arg;
    return v;
  }

  // Flat row-major argmax cell per prototype for a spatial_max node.
  const std::vector<std::uint32_t>& argmax_cells(Var spatial_max_node) const {
    auto it = argmax_.find(spatial_max_node.id);
    PROTOLAB_REQUIRE(it != argmax_.end(),
                     "argmax_cells: not a spatial_max node");
    return *it->second;
  }

  // Min over the given prototype rows and all cells of a distance map.
  // Ties resolve to the first candidate in scan order (rows as given,
  // cells row-major).
  Var masked_min(Var distances, std::span<const std::size_t> rows) {
    const Tensor& x = value(distances);
    PROTOLAB_REQUIRE(x.rank() == 3, "masked_min: need rank 3, got ",
                     shape_str(x));
    PROTOLAB_REQUIRE(!rows.empty(), "masked_min: empty row set");
    const std::size_t m = x.extent(0), n = x.extent(1) * x.extent(2);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_at = 0;
    for (std::size_t r : rows) {
      PROTOLAB_REQUIRE(r < m, "masked_min: row ", r, " out of range for ",
                       shape_str(x));
      const double* row = x.data() + r * n;
      for (std::size_t j = 0; j < n; ++j)
        if (row[j] < best) {
          best = row[j];
          best_at = r * n + j;
        }
    }
    return make_op(Tensor::scalar(best), {distances},
                   [distances, best_at](Tape& t, Node& self) {
                     if (!t.needs_grad(distances)) return;
                     t.grad_of(distances)[best_at] += self.grad[0];
                   });
  }

  // Mean of one prototype's map over a set of cells.
  Var region_mean(Var maps, std::size_t row, std::span<const Cell> cells) {
    const Tensor& x = value(maps);
    PROTOLAB_REQUIRE(x.rank() == 3, "region_mean: need rank 3, got ",
                     shape_str(x));
    PROTOLAB_REQUIRE(!cells.empty(), "region_mean: empty cell set");
    PROTOLAB_REQUIRE(row < x.extent(0), "region_mean: row ", row,
                     " out of range for ", shape_str(x));
    const std::size_t h = x.extent(1), w = x.extent(2);
    auto flat = std::make_shared<std::vector<std::size_t>>();
    flat->reserve(cells.size());
    double sum = 0.0;
    for (const Cell& c : cells) {
      PROTOLAB_REQUIRE(c.i < h && c.j < w, "region_mean: cell (", c.i, ",",
                       c.j, ") out of range for ", shape_str(x));
      const std::size_t o = (row * h + c.i) * w + c.j;
      flat->push_back(o);
      sum += x[o];
    }
    const double inv = 1.0 / static_cast<double>(flat->size());
    return make_op(Tensor::scalar(sum * inv), {maps},
                   [maps, flat, inv](Tape& t, Node& self) {
                     if (!t.needs_grad(maps)) return;
                     Tensor& dx = t.grad_of(maps);
                     const double g = self.grad[0] * inv;
                     for (std::size_t o : *flat) dx[o] += g;
                   });
  }

  Var add(Var a, Var b) { return combine(a, b, 1.0, 1.0, "add"); }
  Var sub(Var a, Var b) { return combine(a, b, 1.0, -1.0, "sub"); }

  Var mul(Var a, Var b) {
    const Tensor& xa = value(a);
    const Tensor& xb = value(b);
    PROTOLAB_REQUIRE(xa.same_shape(xb), "mul: shape mismatch ", shape_str(xa),
                     " vs ", shape_str(xb));
    Tensor out(xa.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] * xb[i];
    return make_op(std::move(out), {a, b}, [a, b](Tape& t, Node& self) {
      if (t.needs_grad(a)) {
        Tensor& da = t.grad_of(a);
        const Tensor& xb = t.value(b);
        for (std::size_t i = 0; i < da.size(); ++i)
          da[i] += xb[i] * self.grad[i];
      }
      if (t.needs_grad(b)) {
        Tensor& db = t.grad_of(b);
        const Tensor& xa = t.value(a);
        for (std::size_t i = 0; i < db.size(); ++i)
          db[i] += xa[i] * self.grad[i];
      }
    });
  }

  // Scalar dot product with a constant weight tensor of the same size.
  Var weighted_sum(Var a, Tensor weights) {
    const Tensor& x = value(a);
    PROTOLAB_REQUIRE(weights.size() == x.size(), "weighted_sum: weights size ",
                     weights.size(), " vs tensor ", shape_str(x));
    auto w = std::make_shared<Tensor>(std::move(weights));
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sum += (*w)[i] * x[i];
    return make_op(Tensor::scalar(sum), {a}, [a, w](Tape& t, Node& self) {
      if (!t.needs_grad(a)) return;
      Tensor& dx = t.grad_of(a);
      const double g = self.grad[0];
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * (*w)[i];
    });
  }

  Var scale(Var a, double c) {
    const Tensor& x = value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
    return make_op(std::move(out), {a}, [a, c](Tape& t, Node& self) {
      if (!t.needs_grad(a)) return;
      Tensor& dx = t.grad_of(a);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * self.grad[i];
    });
  }

  // Sum of coeff * var over same-shaped operands.
  Var affine(std::span<const std::pair<double, Var>> terms) {
    PROTOLAB_REQUIRE(!terms.empty(), "affine: no terms");
    Tensor out(value(terms[0].second).shape());
    for (auto& [c, v] : terms) {
      const Tensor& x = value(v);
      PROTOLAB_REQUIRE(x.same_shape(out), "affine: shape mismatch ",
                       shape_str(x), " vs ", shape_str(out));
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * x[i];
    }
    auto saved = std::make_shared<std::vector<std::pair<double, Var>>>(
        terms.begin(), terms.end());
    std::vector<Var> deps;
    for (auto& [c, v] : terms) deps.push_back(v);
    return make_op(std::move(out), deps, [saved](Tape& t, Node& self) {
      for (auto& [c, v] : *saved) {
        if (!t.needs_grad(v)) continue;
        Tensor& dx = t.grad_of(v);
        for (std::size_t i = 0; i < dx.size(); ++i)
          dx[i] += c * self.grad[i];
      }
    });
  }

  // Sum of |w_i| over entries with mask != 0; subgradient sign(0) = 0.
  Var l1_masked(Var weights, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    const Tensor& x = value(weights);
    PROTOLAB_REQUIRE(mask && mask->size() == x.size(), "l1_masked: mask size ",
                     mask ? mask->size() : 0, " vs tensor ", shape_str(x));
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if ((*mask)[i]) sum += std::abs(x[i]);
    return make_op(Tensor::scalar(sum), {weights},
                   [weights, mask](Tape& t, Node& self) {
                     if (!t.needs_grad(weights)) return;
                     const Tensor& x = t.value(weights);
                     Tensor& dx = t.grad_of(weights);
                     const double g = self.grad[0];
                     for (std::size_t i = 0; i < dx.size(); ++i) {
                       if (!(*mask)[i] || x[i] == 0.0) continue;
                       dx[i] += g * (x[i] > 0.0 ? 1.0 : -1.0);
                     }
                   });
  }

  bool needs_grad(Var v) const { return v.valid() && node(v).requires_grad; }

  Tensor& grad_of(Var v) { return grad_buf(node(v)); }

 private:
  Node& node(Var v) {
    PROTOLAB_REQUIRE(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(),
                     "invalid tape handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

  Tensor& grad_buf(Node& n) {
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var make_op(Tensor value, std::initializer_list<Var> deps,
              std::function<void(Tape&, Node&)> backprop) {
    return make_op(std::move(value),
                   std::vector<Var>(deps.begin(), deps.end()),
                   std::move(backprop));
  }

  Var make_op(Tensor value, const std::vector<Var>& deps,
              std::function<void(Tape&, Node&)> backprop) {
    Node n;
    n.value = std::move(value);
    for (Var d : deps)
      if (d.valid() && node(d).requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backprop = std::move(backprop);
    return push(std::move(n));
  }

  Var combine(Var a, Var b, double ca, double cb, const char* name) {
    const Tensor& xa = value(a);
    const Tensor& xb = value(b);
    PROTOLAB_REQUIRE(xa.same_shape(xb), name, ": shape mismatch ",
                     shape_str(xa), " vs ", shape_str(xb));
    Tensor out(xa.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = ca * xa[i] + cb * xb[i];
    return make_op(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, Node& self) {
      if (t.needs_grad(a)) {
        Tensor& da = t.grad_of(a);
        for (std::size_t i = 0; i < da.size(); ++i)
          da[i] += ca * self.grad[i];
      }
      if (t.needs_grad(b)) {
        Tensor& db = t.grad_of(b);
        for (std::size_t i = 0; i < db.size(); ++i)
          db[i] += cb * self.grad[i];
      }
    });
  }

  static void im2col(const Tensor& x, std::size_t kh, std::size_t kw,
                     std::size_t stride, std::size_t padding, std::size_t ho,
                     std::size_t wo, Tensor& col) {
    const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t n = ho * wo;
    for (std::size_t c = 0; c < ci; ++c) {
      const double* plane = x.data() + c * h * w;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          double* row = col.data() + ((c * kh + u) * kw + v) * n;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + u) -
                static_cast<std::ptrdiff_t>(padding);
            double* out = row + oy * wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
              for (std::size_t ox = 0; ox < wo; ++ox) out[ox] = 0.0;
              continue;
            }
            const double* src = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + v) -
                  static_cast<std::ptrdiff_t>(padding);
              out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                            ? 0.0
                            : src[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }

  static void col2im_add(const Tensor& dcol, std::size_t ci, std::size_t h,
                         std::size_t w, std::size_t kh, std::size_t kw,
                         std::size_t stride, std::size_t padding,
                         std::size_t ho, std::size_t wo, Tensor& dx) {
    const std::size_t n = ho * wo;
    for (std::size_t c = 0; c < ci; ++c) {
      double* plane = dx.data() + c * h * w;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const double* row = dcol.data() + ((c * kh + u) * kw + v) * n;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + u) -
                static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* src = row + oy * wo;
            double* dst = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + v) -
                  static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::int32_t, std::shared_ptr<std::vector<std::uint32_t>>>
      argmax_;
};

}  // namespace protolab
