#include "tfv/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>

namespace tfv::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var Graph::make(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (Var v : inputs) rg = rg || nodes_.at(v.id).requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(const std::string& name, const Tensor& value) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    Var v = track_ ? input(value) : constant(value);
    params_.emplace(name, v);
    return v;
}

Tensor Graph::grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
}

Tensor& Graph::grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
        n.grad = Tensor(n.value.shape(), 0.0);
    }
    return n.grad;
}

void Graph::backward(Var out, double seed) {
    if (nodes_.at(out.id).value.size() != 1) {
        throw ShapeError("backward target must be a scalar");
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[out.id].requires_grad) return;
    grad_buffer(out.id)[0] = seed;
    for (int id = out.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, id);
    }
}

namespace {

void accumulate(Graph& g, Var target, const double* src, size_t n) {
    if (!g.needs(target)) return;
    Tensor& dst = g.grad_buffer(target.id);
    for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

// Plain loops rather than Eigen reductions: vectorized reductions over
// unaligned maps round differently depending on the buffer address.
void add_row_sums(const CMapMat& m, double* out) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        double acc = 0.0;
        for (Eigen::Index c = 0; c < m.cols(); ++c) acc += m(r, c);
        out[r] += acc;
    }
}

void check_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
    }
}

} // namespace

Var add(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return g.make(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
        const Tensor& d = gr.grad_buffer(self);
        accumulate(gr, a, d.data(), d.size());
        accumulate(gr, b, gr.grad_buffer(self).data(), d.size());
    });
}

Var scale(Graph& g, Var a, double s) {
    Tensor out = g.value(a);
    for (double& v : out.values()) v *= s;
    return g.make(std::move(out), {a}, [a, s](Graph& gr, int self) {
        Tensor d = gr.grad_buffer(self);
        for (double& v : d.values()) v *= s;
        accumulate(gr, a, d.data(), d.size());
    });
}

Var add_channel_bias(Graph& g, Var x, Var bias) {
    const Tensor& xv = g.value(x);
    const Tensor& bv = g.value(bias);
    check_rank(bv, 1, "add_channel_bias");
    int N = 1, C = 0, P = 1;
    if (xv.rank() == 4) {
        N = xv.dim(0);
        C = xv.dim(1);
        P = xv.dim(2) * xv.dim(3);
    } else if (xv.rank() == 1) {
        C = xv.dim(0);
    } else {
        throw ShapeError("add_channel_bias: x must be (N, C, H, W) or (C)");
    }
    if (bv.dim(0) != C) throw ShapeError("add_channel_bias: channel count mismatch");
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double* row = out.data() + (static_cast<size_t>(n) * C + c) * P;
            for (int p = 0; p < P; ++p) row[p] += bv[c];
        }
    return g.make(std::move(out), {x, bias}, [x, bias, N, C, P](Graph& gr, int self) {
        const Tensor d = gr.grad_buffer(self);
        accumulate(gr, x, d.data(), d.size());
        if (gr.needs(bias)) {
            Tensor& db = gr.grad_buffer(bias.id);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* row = d.data() + (static_cast<size_t>(n) * C + c) * P;
                    double s = 0.0;
                    for (int p = 0; p < P; ++p) s += row[p];
                    db[c] += s;
                }
        }
    });
}

Var silu(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
    return g.make(std::move(out), {x}, [x](Graph& gr, int self) {
        const Tensor& xv2 = gr.value_of(x.id);
        Tensor d = gr.grad_buffer(self);
        for (size_t i = 0; i < d.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv2[i]));
            d[i] *= s * (1.0 + xv2[i] * (1.0 - s));
        }
        accumulate(gr, x, d.data(), d.size());
    });
}

Var linear(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    const Tensor& bv = g.value(b);
    check_rank(xv, 1, "linear x");
    check_rank(wv, 2, "linear w");
    const int out_dim = wv.dim(0), in_dim = wv.dim(1);
    if (xv.dim(0) != in_dim || bv.size() != static_cast<size_t>(out_dim)) {
        throw ShapeError("linear: dimension mismatch");
    }
    // matrix-vector products are written out for the same address-independence
    // reason as add_row_sums
    Tensor out({out_dim});
    for (int o = 0; o < out_dim; ++o) {
        const double* row = wv.data() + static_cast<size_t>(o) * in_dim;
        double acc = 0.0;
        for (int i = 0; i < in_dim; ++i) acc += row[i] * xv[i];
        out[o] = acc + bv[o];
    }
    return g.make(std::move(out), {x, w, b}, [x, w, b, out_dim, in_dim](Graph& gr, int self) {
        const Tensor d = gr.grad_buffer(self);
        const Tensor& wv2 = gr.value_of(w.id);
        const Tensor& xv2 = gr.value_of(x.id);
        if (gr.needs(x)) {
            Tensor& dx = gr.grad_buffer(x.id);
            for (int o = 0; o < out_dim; ++o) {
                const double* row = wv2.data() + static_cast<size_t>(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) dx[i] += row[i] * d[o];
            }
        }
        if (gr.needs(w)) {
            Tensor& dw = gr.grad_buffer(w.id);
            for (int o = 0; o < out_dim; ++o) {
                double* row = dw.data() + static_cast<size_t>(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) row[i] += d[o] * xv2[i];
            }
        }
        accumulate(gr, b, d.data(), d.size());
    });
}

namespace {

// (Cin, H, W) -> (Cin * 9, H * W) for a 3x3 kernel with zero padding 1.
void im2col3(const double* x, int C, int H, int W, double* col) {
    const int P = H * W;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                double* row = col + static_cast<size_t>((c * 3 + ky) * 3 + kx) * P;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    double* dst = row + static_cast<size_t>(y) * W;
                    if (sy < 0 || sy >= H) {
                        for (int xx = 0; xx < W; ++xx) dst[xx] = 0.0;
                        continue;
                    }
                    const double* src = x + (static_cast<size_t>(c) * H + sy) * W;
                    for (int xx = 0; xx < W; ++xx) {
                        const int sx = xx + kx - 1;
                        dst[xx] = (sx >= 0 && sx < W) ? src[sx] : 0.0;
                    }
                }
            }
}

void col2im3(const double* col, int C, int H, int W, double* dx) {
    const int P = H * W;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const double* row = col + static_cast<size_t>((c * 3 + ky) * 3 + kx) * P;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= H) continue;
                    double* dst = dx + (static_cast<size_t>(c) * H + sy) * W;
                    const double* src = row + static_cast<size_t>(y) * W;
                    for (int xx = 0; xx < W; ++xx) {
                        const int sx = xx + kx - 1;
                        if (sx >= 0 && sx < W) dst[sx] += src[xx];
                    }
                }
            }
}

} // namespace

Var conv2d(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    check_rank(xv, 4, "conv2d x");
    check_rank(wv, 4, "conv2d w");
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Cin || wv.dim(3) != k || (k != 1 && k != 3)) {
        throw ShapeError("conv2d: weight " + shape_string(wv.shape()) + " incompatible with input " +
                         shape_string(xv.shape()));
    }
    if (g.value(b).size() != static_cast<size_t>(Cout)) throw ShapeError("conv2d: bias size");
    const int P = H * W;
    const int K = Cin * k * k;
    Tensor out({N, Cout, H, W});
    CMapMat wm(wv.data(), Cout, K);
    const Tensor& bv = g.value(b);
    Eigen::Map<const Eigen::VectorXd> bias(bv.data(), Cout);

    // Unfolded inputs are kept for the weight gradient when k == 3.
    auto cols = std::make_shared<std::vector<double>>();
    if (k == 3) cols->resize(static_cast<size_t>(N) * K * P);
    for (int n = 0; n < N; ++n) {
        const double* xn = xv.data() + static_cast<size_t>(n) * Cin * P;
        MapMat yn(out.data() + static_cast<size_t>(n) * Cout * P, Cout, P);
        if (k == 3) {
            double* col = cols->data() + static_cast<size_t>(n) * K * P;
            im2col3(xn, Cin, H, W, col);
            yn.noalias() = wm * CMapMat(col, K, P);
        } else {
            yn.noalias() = wm * CMapMat(xn, K, P);
        }
        yn.colwise() += bias;
    }
    return g.make(std::move(out), {x, w, b},
                  [x, w, b, cols, N, Cin, Cout, H, W, P, K, k](Graph& gr, int self) {
                      const Tensor d = gr.grad_buffer(self);
                      const Tensor& wv2 = gr.value_of(w.id);
                      CMapMat wm2(wv2.data(), Cout, K);
                      const bool need_x = gr.needs(x), need_w = gr.needs(w), need_b = gr.needs(b);
                      RowMat dcol;
                      for (int n = 0; n < N; ++n) {
                          CMapMat dy(d.data() + static_cast<size_t>(n) * Cout * P, Cout, P);
                          const double* col =
                              k == 3 ? cols->data() + static_cast<size_t>(n) * K * P
                                     : gr.value_of(x.id).data() + static_cast<size_t>(n) * K * P;
                          if (need_w) {
                              MapMat(gr.grad_buffer(w.id).data(), Cout, K).noalias() +=
                                  dy * CMapMat(col, K, P).transpose();
                          }
                          if (need_b) add_row_sums(dy, gr.grad_buffer(b.id).data());
                          if (need_x) {
                              double* dx =
                                  gr.grad_buffer(x.id).data() + static_cast<size_t>(n) * Cin * P;
                              if (k == 3) {
                                  dcol.noalias() = wm2.transpose() * dy;
                                  col2im3(dcol.data(), Cin, H, W, dx);
                              } else {
                                  MapMat(dx, K, P).noalias() += wm2.transpose() * dy;
                              }
                          }
                      }
                  });
}

Var avg_pool2(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    check_rank(xv, 4, "avg_pool2");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size");
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    for (int nc = 0; nc < N * C; ++nc) {
        const double* src = xv.data() + static_cast<size_t>(nc) * H * W;
        double* dst = out.data() + static_cast<size_t>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) {
                const double* s = src + (2 * y) * W + 2 * xx;
                dst[y * Wo + xx] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    }
    return g.make(std::move(out), {x}, [x, N, C, H, W, Ho, Wo](Graph& gr, int self) {
        if (!gr.needs(x)) return;
        const Tensor d = gr.grad_buffer(self);
        Tensor& dx = gr.grad_buffer(x.id);
        for (int nc = 0; nc < N * C; ++nc) {
            const double* src = d.data() + static_cast<size_t>(nc) * Ho * Wo;
            double* dst = dx.data() + static_cast<size_t>(nc) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    const double v = 0.25 * src[y * Wo + xx];
                    double* t = dst + (2 * y) * W + 2 * xx;
                    t[0] += v;
                    t[1] += v;
                    t[W] += v;
                    t[W + 1] += v;
                }
        }
    });
}

Var upsample2(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    check_rank(xv, 4, "upsample2");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = 2 * H, Wo = 2 * W;
    Tensor out({N, C, Ho, Wo});
    for (int nc = 0; nc < N * C; ++nc) {
        const double* src = xv.data() + static_cast<size_t>(nc) * H * W;
        double* dst = out.data() + static_cast<size_t>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) dst[y * Wo + xx] = src[(y / 2) * W + xx / 2];
    }
    return g.make(std::move(out), {x}, [x, N, C, H, W, Ho, Wo](Graph& gr, int self) {
        if (!gr.needs(x)) return;
        const Tensor d = gr.grad_buffer(self);
        Tensor& dx = gr.grad_buffer(x.id);
        for (int nc = 0; nc < N * C; ++nc) {
            const double* src = d.data() + static_cast<size_t>(nc) * Ho * Wo;
            double* dst = dx.data() + static_cast<size_t>(nc) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) dst[(y / 2) * W + xx / 2] += src[y * Wo + xx];
        }
    });
}

Var concat_channels(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    check_rank(av, 4, "concat_channels");
    check_rank(bv, 4, "concat_channels");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
        throw ShapeError("concat_channels: incompatible " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
    }
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    const size_t P = static_cast<size_t>(av.dim(2)) * av.dim(3);
    Tensor out({N, Ca + Cb, av.dim(2), av.dim(3)});
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * P, Ca * P, out.data() + n * (Ca + Cb) * P);
        std::copy_n(bv.data() + n * Cb * P, Cb * P, out.data() + (n * (Ca + Cb) + Ca) * P);
    }
    return g.make(std::move(out), {a, b}, [a, b, N, Ca, Cb, P](Graph& gr, int self) {
        const Tensor d = gr.grad_buffer(self);
        for (int n = 0; n < N; ++n) {
            if (gr.needs(a)) {
                double* da = gr.grad_buffer(a.id).data() + n * Ca * P;
                const double* s = d.data() + n * (Ca + Cb) * P;
                for (size_t i = 0; i < Ca * P; ++i) da[i] += s[i];
            }
            if (gr.needs(b)) {
                double* db = gr.grad_buffer(b.id).data() + n * Cb * P;
                const double* s = d.data() + (n * (Ca + Cb) + Ca) * P;
                for (size_t i = 0; i < Cb * P; ++i) db[i] += s[i];
            }
        }
    });
}

Var temporal_conv(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    check_rank(xv, 4, "temporal_conv x");
    check_rank(wv, 3, "temporal_conv w");
    const int F = xv.dim(0), Cin = xv.dim(1);
    const int P = xv.dim(2) * xv.dim(3);
    const int Cout = wv.dim(0);
    if (wv.dim(1) != Cin || wv.dim(2) != 3) throw ShapeError("temporal_conv: weight shape");
    if (g.value(b).size() != static_cast<size_t>(Cout)) throw ShapeError("temporal_conv: bias");
    auto taps = std::make_shared<std::vector<RowMat>>(3, RowMat(Cout, Cin));
    for (int o = 0; o < Cout; ++o)
        for (int i = 0; i < Cin; ++i)
            for (int k = 0; k < 3; ++k) (*taps)[k](o, i) = wv[(o * Cin + i) * 3 + k];
    Tensor out({F, Cout, xv.dim(2), xv.dim(3)});
    const Tensor& bv = g.value(b);
    Eigen::Map<const Eigen::VectorXd> bias(bv.data(), Cout);
    for (int f = 0; f < F; ++f) {
        MapMat yf(out.data() + static_cast<size_t>(f) * Cout * P, Cout, P);
        yf.colwise() = bias;
        for (int k = 0; k < 3; ++k) {
            const int src = std::clamp(f + k - 1, 0, F - 1);
            yf.noalias() += (*taps)[k] * CMapMat(xv.data() + static_cast<size_t>(src) * Cin * P,
                                                 Cin, P);
        }
    }
    return g.make(std::move(out), {x, w, b},
                  [x, w, b, taps, F, Cin, Cout, P](Graph& gr, int self) {
                      const Tensor d = gr.grad_buffer(self);
                      const Tensor& xv2 = gr.value_of(x.id);
                      std::vector<RowMat> dw(3, RowMat::Zero(Cout, Cin));
                      for (int f = 0; f < F; ++f) {
                          CMapMat dy(d.data() + static_cast<size_t>(f) * Cout * P, Cout, P);
                          if (gr.needs(b)) add_row_sums(dy, gr.grad_buffer(b.id).data());
                          for (int k = 0; k < 3; ++k) {
                              const int src = std::clamp(f + k - 1, 0, F - 1);
                              if (gr.needs(w)) {
                                  dw[k].noalias() +=
                                      dy * CMapMat(xv2.data() + static_cast<size_t>(src) * Cin * P,
                                                   Cin, P)
                                               .transpose();
                              }
                              if (gr.needs(x)) {
                                  MapMat(gr.grad_buffer(x.id).data() +
                                             static_cast<size_t>(src) * Cin * P,
                                         Cin, P)
                                      .noalias() += (*taps)[k].transpose() * dy;
                              }
                          }
                      }
                      if (gr.needs(w)) {
                          Tensor& gw = gr.grad_buffer(w.id);
                          for (int o = 0; o < Cout; ++o)
                              for (int i = 0; i < Cin; ++i)
                                  for (int k = 0; k < 3; ++k) gw[(o * Cin + i) * 3 + k] += dw[k](o, i);
                      }
                  });
}

Var temporal_attention(Graph& g, Var q, Var k, Var v) {
    const Tensor& qv = g.value(q);
    const Tensor& kv = g.value(k);
    const Tensor& vv = g.value(v);
    check_rank(qv, 4, "temporal_attention");
    require_same_shape(qv, kv, "temporal_attention q/k");
    require_same_shape(qv, vv, "temporal_attention q/v");
    const int F = qv.dim(0), C = qv.dim(1);
    const int P = qv.dim(2) * qv.dim(3);
    const double sc = 1.0 / std::sqrt(static_cast<double>(C));
    auto at = [C, P](int f, int c, int p) { return (static_cast<size_t>(f) * C + c) * P + p; };
    // attention weights, layout [p][f][g]
    auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(P) * F * F);
    Tensor out(qv.shape(), 0.0);
    std::vector<double> s(F);
    for (int p = 0; p < P; ++p) {
        for (int f = 0; f < F; ++f) {
            double mx = -1e300;
            for (int h = 0; h < F; ++h) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) acc += qv[at(f, c, p)] * kv[at(h, c, p)];
                s[h] = acc * sc;
                mx = std::max(mx, s[h]);
            }
            double z = 0.0;
            for (int h = 0; h < F; ++h) {
                s[h] = std::exp(s[h] - mx);
                z += s[h];
            }
            double* a = weights->data() + (static_cast<size_t>(p) * F + f) * F;
            for (int h = 0; h < F; ++h) a[h] = s[h] / z;
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int h = 0; h < F; ++h) acc += a[h] * vv[at(h, c, p)];
                out[at(f, c, p)] = acc;
            }
        }
    }
    return g.make(std::move(out), {q, k, v}, [q, k, v, weights, F, C, P, sc, at](Graph& gr, int self) {
        const Tensor d = gr.grad_buffer(self);
        const Tensor& qv2 = gr.value_of(q.id);
        const Tensor& kv2 = gr.value_of(k.id);
        const Tensor& vv2 = gr.value_of(v.id);
        Tensor dq(qv2.shape(), 0.0), dk(qv2.shape(), 0.0), dv(qv2.shape(), 0.0);
        std::vector<double> da(F), ds(F);
        for (int p = 0; p < P; ++p)
            for (int f = 0; f < F; ++f) {
                const double* a = weights->data() + (static_cast<size_t>(p) * F + f) * F;
                double dot = 0.0;
                for (int h = 0; h < F; ++h) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c) {
                        acc += d[at(f, c, p)] * vv2[at(h, c, p)];
                        dv[at(h, c, p)] += a[h] * d[at(f, c, p)];
                    }
                    da[h] = acc;
                    dot += a[h] * acc;
                }
                for (int h = 0; h < F; ++h) ds[h] = a[h] * (da[h] - dot) * sc;
                for (int h = 0; h < F; ++h)
                    for (int c = 0; c < C; ++c) {
                        dq[at(f, c, p)] += ds[h] * kv2[at(h, c, p)];
                        dk[at(h, c, p)] += ds[h] * qv2[at(f, c, p)];
                    }
            }
        accumulate(gr, q, dq.data(), dq.size());
        accumulate(gr, k, dk.data(), dk.size());
        accumulate(gr, v, dv.data(), dv.size());
    });
}

Var global_avg_pool(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    check_rank(xv, 4, "global_avg_pool");
    const int N = xv.dim(0), C = xv.dim(1);
    const int P = xv.dim(2) * xv.dim(3);
    const double inv = 1.0 / (static_cast<double>(N) * P);
    Tensor out({C}, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* row = xv.data() + (static_cast<size_t>(n) * C + c) * P;
            double s = 0.0;
            for (int p = 0; p < P; ++p) s += row[p];
            out[c] += s * inv;
        }
    return g.make(std::move(out), {x}, [x, N, C, P, inv](Graph& gr, int self) {
        if (!gr.needs(x)) return;
        const Tensor d = gr.grad_buffer(self);
        Tensor& dx = gr.grad_buffer(x.id);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* row = dx.data() + (static_cast<size_t>(n) * C + c) * P;
                for (int p = 0; p < P; ++p) row[p] += d[c] * inv;
            }
    });
}

Var mse(Graph& g, Var pred, const Tensor& target) {
    const Tensor& pv = g.value(pred);
    require_same_shape(pv, target, "mse");
    const double n = static_cast<double>(pv.size());
    auto diff = std::make_shared<Tensor>(pv);
    double acc = 0.0;
    for (size_t i = 0; i < pv.size(); ++i) {
        (*diff)[i] -= target[i];
        acc += (*diff)[i] * (*diff)[i];
    }
    return g.make(Tensor({1}, acc / n), {pred}, [pred, diff, n](Graph& gr, int self) {
        const double s = gr.grad_buffer(self)[0] * 2.0 / n;
        if (!gr.needs(pred)) return;
        Tensor& dp = gr.grad_buffer(pred.id);
        for (size_t i = 0; i < dp.size(); ++i) dp[i] += s * (*diff)[i];
    });
}

Var frame_difference_mse(Graph& g, Var pred, const Tensor& target) {
    const Tensor& pv = g.value(pred);
    require_same_shape(pv, target, "frame_difference_mse");
    check_rank(pv, 4, "frame_difference_mse");
    const int F = pv.dim(0);
    if (F < 2) return g.constant(Tensor({1}, 0.0));
    const size_t fs = pv.size() / F;
    const double n = static_cast<double>(F - 1) * static_cast<double>(fs);
    // residual of adjacent-frame differences, (F - 1) * fs entries
    auto r = std::make_shared<std::vector<double>>((F - 1) * fs);
    double acc = 0.0;
    for (int j = 0; j + 1 < F; ++j)
        for (size_t i = 0; i < fs; ++i) {
            const double d = (pv[(j + 1) * fs + i] - pv[j * fs + i]) -
                             (target[(j + 1) * fs + i] - target[j * fs + i]);
            (*r)[j * fs + i] = d;
            acc += d * d;
        }
    return g.make(Tensor({1}, acc / n), {pred}, [pred, r, F, fs, n](Graph& gr, int self) {
        if (!gr.needs(pred)) return;
        const double s = gr.grad_buffer(self)[0] * 2.0 / n;
        Tensor& dp = gr.grad_buffer(pred.id);
        for (int j = 0; j + 1 < F; ++j)
            for (size_t i = 0; i < fs; ++i) {
                const double v = s * (*r)[j * fs + i];
                dp[(j + 1) * fs + i] += v;
                dp[j * fs + i] -= v;
            }
    });
}

} // namespace tfv::ad
