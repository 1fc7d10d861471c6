#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sda/random.hpp"
#include "sda/tensor.hpp"

namespace sda {

using Var = std::size_t;

namespace detail {

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + e^x) without overflow
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

}  // namespace detail

// Records a forward computation over primitives and replays it in reverse for
// exact gradients. One tape per forward pass; leaves may reference parameter
// storage owned elsewhere (no copies of large matrices per batch).
//
// Every primitive checks its input shapes (ShapeError names the primitive and
// the shapes involved) and verifies its output is finite (NumericError).
// backward() zeroes all gradient buffers before accumulating, so replaying the
// reverse pass yields identical gradients.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ----- leaves ------------------------------------------------------

    Var constant(Tensor v) { return push_owned(std::move(v), "constant", false); }

    Var leaf(Tensor v) { return push_owned(std::move(v), "leaf", true); }

    // Differentiable leaf whose values live outside the tape; `storage` must
    // outlive the tape.
    Var param(const Tensor* storage) {
        Node n;
        n.external = storage;
        n.op = "param";
        n.requires_grad = true;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    const Tensor& val(Var v) const {
        const Node& n = nodes_[v];
        return n.external ? *n.external : n.value;
    }

    const Tensor& grad(Var v) const { return nodes_[v].grad; }

    std::size_t size() const { return nodes_.size(); }

    // ----- elementwise primitives ---------------------------------------

    Var add(Var a, Var b) {
        require_same_shape("add", a, b);
        Tensor out{val(a).shape()};
        const Tensor &ta = val(a), &tb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
        return push_op(std::move(out), "add", {a, b}, [a, b](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor &ga = t.nodes_[a].grad, &gb = t.nodes_[b].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        require_same_shape("mul", a, b);
        Tensor out{val(a).shape()};
        const Tensor &ta = val(a), &tb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
        return push_op(std::move(out), "mul", {a, b}, [a, b](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor &ta = t.val(a), &tb = t.val(b);
            Tensor &ga = t.nodes_[a].grad, &gb = t.nodes_[b].grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * tb[i];
                gb[i] += g[i] * ta[i];
            }
        });
    }

    Var scale(Var a, double c) {
        Tensor out{val(a).shape()};
        const Tensor& ta = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta[i];
        return push_op(std::move(out), "scale", {a}, [a, c](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.nodes_[a].grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }

    Var tanh_op(Var a) {
        return unary(a, "tanh", [](double x) { return std::tanh(x); },
                     [](double /*x*/, double y) { return 1.0 - y * y; });
    }

    Var sigmoid(Var a) {
        return unary(a, "sigmoid", [](double x) { return detail::stable_sigmoid(x); },
                     [](double /*x*/, double y) { return y * (1.0 - y); });
    }

    Var relu(Var a) {
        return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double /*y*/) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Var log_op(Var a) {
        return unary(a, "log", [](double x) { return std::log(x); },
                     [](double x, double /*y*/) { return 1.0 / x; });
    }

    Var exp_op(Var a) {
        return unary(a, "exp", [](double x) { return std::exp(x); },
                     [](double /*x*/, double y) { return y; });
    }

    // mat (B x K) plus a length-K row vector broadcast over rows
    Var add_rowvec(Var m, Var v) {
        const Tensor &tm = val(m), &tv = val(v);
        if (tm.rank() != 2 || tv.rank() != 1 || tm.dim(1) != tv.dim(0))
            throw ShapeError("add_rowvec: " + shape_str(tm.shape()) + " vs " + shape_str(tv.shape()));
        const int B = tm.dim(0), K = tm.dim(1);
        Tensor out{tm.shape()};
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < K; ++j) out.at(i, j) = tm.at(i, j) + tv.at(j);
        return push_op(std::move(out), "add_rowvec", {m, v}, [m, v, B, K](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor &gm = t.nodes_[m].grad, &gv = t.nodes_[v].grad;
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < K; ++j) {
                    gm.at(i, j) += g.at(i, j);
                    gv.at(j) += g.at(i, j);
                }
        });
    }

    // mat (B x K) scaled rowwise by a (B x 1) column
    Var mul_colvec(Var m, Var c) {
        const Tensor &tm = val(m), &tc = val(c);
        if (tm.rank() != 2 || tc.rank() != 2 || tc.dim(1) != 1 || tm.dim(0) != tc.dim(0))
            throw ShapeError("mul_colvec: " + shape_str(tm.shape()) + " vs " + shape_str(tc.shape()));
        const int B = tm.dim(0), K = tm.dim(1);
        Tensor out{tm.shape()};
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < K; ++j) out.at(i, j) = tm.at(i, j) * tc.at(i, 0);
        return push_op(std::move(out), "mul_colvec", {m, c}, [m, c, B, K](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor &tm = t.val(m), &tc = t.val(c);
            Tensor &gm = t.nodes_[m].grad, &gc = t.nodes_[c].grad;
            for (int i = 0; i < B; ++i) {
                double acc = 0.0;
                for (int j = 0; j < K; ++j) {
                    gm.at(i, j) += g.at(i, j) * tc.at(i, 0);
                    acc += g.at(i, j) * tm.at(i, j);
                }
                gc.at(i, 0) += acc;
            }
        });
    }

    // ----- linear algebra -------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
            throw ShapeError("matmul: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        const int M = ta.dim(0), K = ta.dim(1), N = tb.dim(1);
        Tensor out{Shape{M, N}};
        matmul_acc(ta.data(), tb.data(), out.data(), M, K, N);
        return push_op(std::move(out), "matmul", {a, b}, [a, b, M, K, N](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor &ta = t.val(a), &tb = t.val(b);
            Tensor &ga = t.nodes_[a].grad, &gb = t.nodes_[b].grad;
            // dA = g . B^T
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    double acc = 0.0;
                    for (int j = 0; j < N; ++j) acc += g.at(i, j) * tb.at(k, j);
                    ga.at(i, k) += acc;
                }
            // dB = A^T . g
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    const double av = ta.at(i, k);
                    for (int j = 0; j < N; ++j) gb.at(k, j) += av * g.at(i, j);
                }
        });
    }

    // x (B x K) . w (K x N) + bias (N)
    Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

    // ----- text-model primitives -----------------------------------------

    // Embedding lookup: table (V x D), ids (B x L) -> (B x L x D).
    Var embedding(Var table, const TokenMatrix& ids) {
        const Tensor& e = val(table);
        if (e.rank() != 2) throw ShapeError("embedding: table " + shape_str(e.shape()));
        const int V = e.dim(0), D = e.dim(1), B = ids.rows, L = ids.cols;
        for (std::int32_t id : ids.ids)
            if (id < 0 || id >= V)
                throw InvalidArgument("embedding: token id " + std::to_string(id) + " out of range [0," +
                                      std::to_string(V) + ")");
        Tensor out{Shape{B, L, D}};
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < L; ++j) {
                const double* row = e.data() + static_cast<std::size_t>(ids.at(i, j)) * D;
                double* dst = out.data() + (static_cast<std::size_t>(i) * L + j) * D;
                std::copy(row, row + D, dst);
            }
        auto idv = std::make_shared<TokenMatrix>(ids);
        return push_op(std::move(out), "embedding", {table}, [table, idv, B, L, D](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ge = t.nodes_[table].grad;
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < L; ++j) {
                    double* dst = ge.data() + static_cast<std::size_t>(idv->at(i, j)) * D;
                    const double* src = g.data() + (static_cast<std::size_t>(i) * L + j) * D;
                    for (int d = 0; d < D; ++d) dst[d] += src[d];
                }
        });
    }

    // Valid 1-D convolution over time: x (B x L x D), w (k x D x F), bias (F)
    // -> (B x (L-k+1) x F). Cross-correlation convention (no kernel flip).
    Var conv1d(Var x, Var w, Var b) {
        const Tensor &tx = val(x), &tw = val(w), &tb = val(b);
        if (tx.rank() != 3 || tw.rank() != 3 || tx.dim(2) != tw.dim(1))
            throw ShapeError("conv1d: input " + shape_str(tx.shape()) + " vs kernel " + shape_str(tw.shape()));
        if (tb.rank() != 1 || tb.dim(0) != tw.dim(2))
            throw ShapeError("conv1d: kernel " + shape_str(tw.shape()) + " vs bias " + shape_str(tb.shape()));
        const int B = tx.dim(0), L = tx.dim(1), D = tx.dim(2), k = tw.dim(0), F = tw.dim(2);
        if (k > L)
            throw ShapeError("conv1d: kernel size " + std::to_string(k) + " exceeds input length " +
                             std::to_string(L));
        const int T = L - k + 1;
        Tensor out{Shape{B, T, F}};
        for (int i = 0; i < B; ++i)
            for (int t = 0; t < T; ++t) {
                double* o = out.data() + (static_cast<std::size_t>(i) * T + t) * F;
                for (int f = 0; f < F; ++f) o[f] = tb.at(f);
                for (int tau = 0; tau < k; ++tau)
                    for (int d = 0; d < D; ++d) {
                        const double xv = tx.at(i, t + tau, d);
                        const double* wr = tw.data() + (static_cast<std::size_t>(tau) * D + d) * F;
                        for (int f = 0; f < F; ++f) o[f] += xv * wr[f];
                    }
            }
        return push_op(std::move(out), "conv1d", {x, w, b}, [x, w, b, B, T, D, k, F](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor &tx = t.val(x), &tw = t.val(w);
            Tensor &gx = t.nodes_[x].grad, &gw = t.nodes_[w].grad, &gb = t.nodes_[b].grad;
            for (int i = 0; i < B; ++i)
                for (int tt = 0; tt < T; ++tt) {
                    const double* go = g.data() + (static_cast<std::size_t>(i) * T + tt) * F;
                    for (int f = 0; f < F; ++f) gb.at(f) += go[f];
                    for (int tau = 0; tau < k; ++tau)
                        for (int d = 0; d < D; ++d) {
                            const double* wr = tw.data() + (static_cast<std::size_t>(tau) * D + d) * F;
                            double* gwr = gw.data() + (static_cast<std::size_t>(tau) * D + d) * F;
                            const double xv = tx.at(i, tt + tau, d);
                            double acc = 0.0;
                            for (int f = 0; f < F; ++f) {
                                acc += go[f] * wr[f];
                                gwr[f] += go[f] * xv;
                            }
                            gx.at(i, tt + tau, d) += acc;
                        }
                }
        });
    }

    // (B x T x F) -> (B x F), max over the time axis; ties keep the earliest.
    Var max_over_time(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3) throw ShapeError("max_over_time: input " + shape_str(tx.shape()));
        const int B = tx.dim(0), T = tx.dim(1), F = tx.dim(2);
        Tensor out{Shape{B, F}};
        auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(B) * F, 0);
        for (int i = 0; i < B; ++i)
            for (int f = 0; f < F; ++f) {
                double best = tx.at(i, 0, f);
                int bt = 0;
                for (int t = 1; t < T; ++t)
                    if (tx.at(i, t, f) > best) {
                        best = tx.at(i, t, f);
                        bt = t;
                    }
                out.at(i, f) = best;
                (*arg)[static_cast<std::size_t>(i) * F + f] = bt;
            }
        return push_op(std::move(out), "max_over_time", {x}, [x, arg, B, F](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.nodes_[x].grad;
            for (int i = 0; i < B; ++i)
                for (int f = 0; f < F; ++f)
                    gx.at(i, (*arg)[static_cast<std::size_t>(i) * F + f], f) += g.at(i, f);
        });
    }

    // Mean over one axis. Rank-1 input with axis 0 reduces to a scalar.
    Var mean_over_axis(Var x, int axis) {
        const Tensor& tx = val(x);
        if (tx.rank() == 1) {
            if (axis != 0) throw ShapeError("mean_over_axis: axis " + std::to_string(axis) + " for rank-1 input");
            const int N = tx.dim(0);
            double s = 0.0;
            for (int i = 0; i < N; ++i) s += tx.at(i);
            Tensor out = Tensor::scalar(s / N);
            return push_op(std::move(out), "mean_over_axis", {x}, [x, N](Tape& t, Var self) {
                const double g = t.nodes_[self].grad[0] / N;
                Tensor& gx = t.nodes_[x].grad;
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            });
        }
        if (tx.rank() != 2 || (axis != 0 && axis != 1))
            throw ShapeError("mean_over_axis: axis " + std::to_string(axis) + " for input " +
                             shape_str(tx.shape()));
        const int M = tx.dim(0), N = tx.dim(1);
        if (axis == 0) {
            Tensor out{Shape{N}};
            for (int j = 0; j < N; ++j) {
                double s = 0.0;
                for (int i = 0; i < M; ++i) s += tx.at(i, j);
                out.at(j) = s / M;
            }
            return push_op(std::move(out), "mean_over_axis", {x}, [x, M, N](Tape& t, Var self) {
                const Tensor& g = t.nodes_[self].grad;
                Tensor& gx = t.nodes_[x].grad;
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) gx.at(i, j) += g.at(j) / M;
            });
        }
        Tensor out{Shape{M}};
        for (int i = 0; i < M; ++i) {
            double s = 0.0;
            for (int j = 0; j < N; ++j) s += tx.at(i, j);
            out.at(i) = s / N;
        }
        return push_op(std::move(out), "mean_over_axis", {x}, [x, M, N](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.nodes_[x].grad;
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) gx.at(i, j) += g.at(i) / N;
        });
    }

    // Stable softmax along `axis` of a rank-1 or rank-2 tensor.
    Var softmax(Var x, int axis) {
        const Tensor& tx = val(x);
        if (tx.rank() == 1) {
            if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " for rank-1 input");
            Tensor out{tx.shape()};
            softmax_row(tx.data(), out.data(), tx.size(), 1);
            return push_softmax(std::move(out), x, static_cast<int>(tx.size()), 1, 1);
        }
        if (tx.rank() != 2 || (axis != 0 && axis != 1))
            throw ShapeError("softmax: axis " + std::to_string(axis) + " for input " + shape_str(tx.shape()));
        const int M = tx.dim(0), N = tx.dim(1);
        Tensor out{tx.shape()};
        if (axis == 1) {
            for (int i = 0; i < M; ++i) softmax_row(tx.data() + static_cast<std::size_t>(i) * N, out.data() + static_cast<std::size_t>(i) * N, N, 1);
            return push_softmax(std::move(out), x, N, M, 1);
        }
        for (int j = 0; j < N; ++j) softmax_row(tx.data() + j, out.data() + j, M, N);
        return push_softmax_axis0(std::move(out), x, M, N);
    }

    // Softmax over axis 1 of (B x L) restricted to positions where mask != 0.
    // Masked-out outputs are 0. A fully masked row falls back to the uniform
    // distribution over all L positions and passes no gradient.
    Var masked_softmax(Var x, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw ShapeError("masked_softmax: input " + shape_str(tx.shape()));
        const int B = tx.dim(0), L = tx.dim(1);
        if (mask->size() != static_cast<std::size_t>(B) * L)
            throw ShapeError("masked_softmax: mask size " + std::to_string(mask->size()) + " vs input " +
                             shape_str(tx.shape()));
        Tensor out{tx.shape()};
        for (int i = 0; i < B; ++i) {
            const std::uint8_t* mrow = mask->data() + static_cast<std::size_t>(i) * L;
            double mx = -HUGE_VAL;
            for (int j = 0; j < L; ++j)
                if (mrow[j]) mx = std::max(mx, tx.at(i, j));
            if (mx == -HUGE_VAL) {
                for (int j = 0; j < L; ++j) out.at(i, j) = 1.0 / L;
                continue;
            }
            double z = 0.0;
            for (int j = 0; j < L; ++j) {
                const double e = mrow[j] ? std::exp(tx.at(i, j) - mx) : 0.0;
                out.at(i, j) = e;
                z += e;
            }
            for (int j = 0; j < L; ++j) out.at(i, j) /= z;
        }
        return push_op(std::move(out), "masked_softmax", {x}, [x, mask, B, L](Tape& t, Var self) {
            const Tensor &g = t.nodes_[self].grad, &y = t.nodes_[self].value;
            Tensor& gx = t.nodes_[x].grad;
            for (int i = 0; i < B; ++i) {
                const std::uint8_t* mrow = mask->data() + static_cast<std::size_t>(i) * L;
                bool any = false;
                double dot = 0.0;
                for (int j = 0; j < L; ++j)
                    if (mrow[j]) {
                        any = true;
                        dot += g.at(i, j) * y.at(i, j);
                    }
                if (!any) continue;
                for (int j = 0; j < L; ++j)
                    if (mrow[j]) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        });
    }

    // Concatenate rank-2 tensors with equal row counts along axis 1.
    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
        const int B = val(parts[0]).dim(0);
        int total = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            if (tp.rank() != 2 || tp.dim(0) != B)
                throw ShapeError("concat_cols: " + shape_str(val(parts[0]).shape()) + " vs " +
                                 shape_str(tp.shape()));
            total += tp.dim(1);
        }
        Tensor out{Shape{B, total}};
        int off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < tp.dim(1); ++j) out.at(i, off + j) = tp.at(i, j);
            off += tp.dim(1);
        }
        auto ps = std::make_shared<std::vector<Var>>(parts);
        return push_op(std::move(out), "concat_cols", parts, [ps, B, total](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            int off = 0;
            for (Var p : *ps) {
                Tensor& gp = t.nodes_[p].grad;
                const int K = t.val(p).dim(1);
                for (int i = 0; i < B; ++i)
                    for (int j = 0; j < K; ++j) gp.at(i, j) += g.at(i, off + j);
                off += K;
            }
        });
    }

    // Columns [start, start+len) of a (B x K) tensor.
    Var slice_cols(Var x, int start, int len) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || start < 0 || len <= 0 || start + len > tx.dim(1))
            throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") of " + shape_str(tx.shape()));
        const int B = tx.dim(0);
        Tensor out{Shape{B, len}};
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < len; ++j) out.at(i, j) = tx.at(i, start + j);
        return push_op(std::move(out), "slice_cols", {x}, [x, start, len, B](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.nodes_[x].grad;
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < len; ++j) gx.at(i, start + j) += g.at(i, j);
        });
    }

    // Time step t of a (B x L x D) tensor -> (B x D).
    Var slice_time(Var x, int t) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3 || t < 0 || t >= tx.dim(1))
            throw ShapeError("slice_time: step " + std::to_string(t) + " of " + shape_str(tx.shape()));
        const int B = tx.dim(0), L = tx.dim(1), D = tx.dim(2);
        Tensor out{Shape{B, D}};
        for (int i = 0; i < B; ++i) {
            const double* src = tx.data() + (static_cast<std::size_t>(i) * L + t) * D;
            std::copy(src, src + D, out.data() + static_cast<std::size_t>(i) * D);
        }
        return push_op(std::move(out), "slice_time", {x}, [x, t, B, L, D](Tape& tp, Var self) {
            const Tensor& g = tp.nodes_[self].grad;
            Tensor& gx = tp.nodes_[x].grad;
            for (int i = 0; i < B; ++i) {
                double* dst = gx.data() + (static_cast<std::size_t>(i) * L + t) * D;
                const double* src = g.data() + static_cast<std::size_t>(i) * D;
                for (int d = 0; d < D; ++d) dst[d] += src[d];
            }
        });
    }

    // Inverted dropout with an explicit seed; call only in train mode.
    Var dropout(Var x, double p, std::uint64_t seed) {
        if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout: rate " + std::to_string(p));
        const Tensor& tx = val(x);
        auto keep = std::make_shared<std::vector<double>>(tx.size());
        Rng rng(seed);
        const double inv = 1.0 / (1.0 - p);
        for (std::size_t i = 0; i < tx.size(); ++i) (*keep)[i] = rng.uniform() < p ? 0.0 : inv;
        Tensor out{tx.shape()};
        for (std::size_t i = 0; i < tx.size(); ++i) out[i] = tx[i] * (*keep)[i];
        return push_op(std::move(out), "dropout", {x}, [x, keep](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
        });
    }

    Var reshape(Var x, Shape shape) {
        const Tensor& tx = val(x);
        if (shape_size(shape) != tx.size())
            throw ShapeError("reshape: " + shape_str(tx.shape()) + " to " + shape_str(shape));
        Tensor out{std::move(shape), tx.values()};
        return push_op(std::move(out), "reshape", {x}, [x](Tape& t, Var self) {
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.nodes_[x].grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }

    Var reduce_sum(Var x) {
        const Tensor& tx = val(x);
        double s = 0.0;
        for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i];
        return push_op(Tensor::scalar(s), "reduce_sum", {x}, [x](Tape& t, Var self) {
            const double g = t.nodes_[self].grad[0];
            Tensor& gx = t.nodes_[x].grad;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }

    // ----- losses ---------------------------------------------------------

    // Mean binary cross-entropy from logits, computed in the softplus form so
    // saturated outputs stay finite. Gradient is (sigmoid(z) - y) / n.
    Var bce_with_logits(Var logits, std::shared_ptr<const std::vector<int>> labels) {
        const Tensor& tz = val(logits);
        if (tz.rank() != 1 || tz.size() != labels->size())
            throw ShapeError("bce_with_logits: logits " + shape_str(tz.shape()) + " vs " +
                             std::to_string(labels->size()) + " labels");
        for (int y : *labels)
            if (y != 0 && y != 1) throw InvalidArgument("bce_with_logits: label " + std::to_string(y));
        const std::size_t n = tz.size();
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double z = tz[i];
            s += (*labels)[i] == 1 ? detail::softplus(-z) : detail::softplus(z);
        }
        return push_op(Tensor::scalar(s / static_cast<double>(n)), "bce_with_logits", {logits},
                       [logits, labels, n](Tape& t, Var self) {
                           const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
                           const Tensor& tz = t.val(logits);
                           Tensor& gz = t.nodes_[logits].grad;
                           for (std::size_t i = 0; i < n; ++i)
                               gz[i] += g * (detail::stable_sigmoid(tz[i]) - static_cast<double>((*labels)[i]));
                       });
    }

    // sum_i scale * w_i * (p_i - a_i)^2 across aligned parameter tensors; the
    // backward pass adds 2 * scale * w_i * (p_i - a_i) to each parameter
    // gradient. Alignment must be validated by the caller.
    Var quadratic_penalty(const std::vector<Var>& params, std::shared_ptr<const std::vector<const Tensor*>> anchors,
                          std::shared_ptr<const std::vector<const Tensor*>> weights, double scale) {
        if (params.size() != anchors->size() || params.size() != weights->size())
            throw InvalidArgument("quadratic_penalty: mismatched argument counts");
        double s = 0.0;
        for (std::size_t k = 0; k < params.size(); ++k) {
            const Tensor& p = val(params[k]);
            const Tensor &a = *(*anchors)[k], &w = *(*weights)[k];
            if (!p.same_shape(a) || !p.same_shape(w))
                throw ShapeError("quadratic_penalty: param " + shape_str(p.shape()) + " vs anchor " +
                                 shape_str(a.shape()) + " vs weight " + shape_str(w.shape()));
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = p[i] - a[i];
                s += scale * w[i] * d * d;
            }
        }
        auto ps = std::make_shared<std::vector<Var>>(params);
        return push_op(Tensor::scalar(s), "quadratic_penalty", params,
                       [ps, anchors, weights, scale](Tape& t, Var self) {
                           const double g = t.nodes_[self].grad[0];
                           const double c = 2.0 * scale * g;
                           for (std::size_t k = 0; k < ps->size(); ++k) {
                               const Tensor& p = t.val((*ps)[k]);
                               const Tensor &a = *(*anchors)[k], &w = *(*weights)[k];
                               Tensor& gp = t.nodes_[(*ps)[k]].grad;
                               for (std::size_t i = 0; i < p.size(); ++i) gp[i] += c * w[i] * (p[i] - a[i]);
                           }
                       });
    }

    // ----- reverse pass ---------------------------------------------------

    // Zeroes every gradient buffer, seeds d(loss)=1 and replays the tape in
    // reverse. Parameters off the path keep exactly-zero gradients.
    void backward(Var loss) {
        if (loss >= nodes_.size()) throw InvalidArgument("backprop: unknown variable");
        if (val(loss).size() != 1) throw InvalidArgument("backprop: loss must be scalar, got shape " + shape_str(val(loss).shape()));
        for (Var i = 0; i <= loss; ++i) {
            Node& n = nodes_[i];
            if (n.grad.same_shape(val(i)))
                std::fill(n.grad.values().begin(), n.grad.values().end(), 0.0);
            else
                n.grad = Tensor{val(i).shape()};
        }
        nodes_[loss].grad[0] = 1.0;
        for (Var i = loss + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward) continue;
            n.backward(*this, i);
            for (Var p : n.parents)
                if (!nodes_[p].grad.all_finite())
                    throw NumericError(std::string("backprop through ") + n.op + ": non-finite gradient");
        }
    }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        const char* op = "";
        bool requires_grad = false;
        std::vector<Var> parents;
        std::function<void(Tape&, Var)> backward;
    };

    Var push_owned(Tensor v, const char* op, bool req) {
        if (!v.all_finite()) throw NumericError(std::string(op) + ": non-finite input value");
        Node n;
        n.value = std::move(v);
        n.op = op;
        n.requires_grad = req;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    Var push_op(Tensor out, const char* op, std::vector<Var> parents, std::function<void(Tape&, Var)> bw) {
        if (!out.all_finite()) throw NumericError(std::string(op) + ": non-finite output value");
        Node n;
        n.value = std::move(out);
        n.op = op;
        n.parents = std::move(parents);
        for (Var p : n.parents)
            if (nodes_[p].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    template <typename F, typename G>
    Var unary(Var a, const char* op, F f, G dfdx) {
        const Tensor& ta = val(a);
        Tensor out{ta.shape()};
        for (std::size_t i = 0; i < ta.size(); ++i) out[i] = f(ta[i]);
        return push_op(std::move(out), op, {a}, [a, dfdx](Tape& t, Var self) {
            const Tensor &g = t.nodes_[self].grad, &y = t.nodes_[self].value, &x = t.val(a);
            Tensor& ga = t.nodes_[a].grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
        });
    }

    static void matmul_acc(const double* a, const double* b, double* out, int M, int K, int N) {
        for (int i = 0; i < M; ++i)
            for (int k = 0; k < K; ++k) {
                const double av = a[static_cast<std::size_t>(i) * K + k];
                const double* br = b + static_cast<std::size_t>(k) * N;
                double* orow = out + static_cast<std::size_t>(i) * N;
                for (int j = 0; j < N; ++j) orow[j] += av * br[j];
            }
    }

    static void softmax_row(const double* x, double* out, std::size_t n, std::size_t stride) {
        double mx = x[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            out[i * stride] = std::exp(x[i * stride] - mx);
            z += out[i * stride];
        }
        for (std::size_t i = 0; i < n; ++i) out[i * stride] /= z;
    }

    // softmax over contiguous rows (axis 1 / rank-1)
    Var push_softmax(Tensor out, Var x, int N, int M, int /*stride*/) {
        return push_op(std::move(out), "softmax", {x}, [x, M, N](Tape& t, Var self) {
            const Tensor &g = t.nodes_[self].grad, &y = t.nodes_[self].value;
            Tensor& gx = t.nodes_[x].grad;
            for (int i = 0; i < M; ++i) {
                const double* gr = g.data() + static_cast<std::size_t>(i) * N;
                const double* yr = y.data() + static_cast<std::size_t>(i) * N;
                double* gxr = gx.data() + static_cast<std::size_t>(i) * N;
                double dot = 0.0;
                for (int j = 0; j < N; ++j) dot += gr[j] * yr[j];
                for (int j = 0; j < N; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    // softmax down columns of a (M x N) tensor
    Var push_softmax_axis0(Tensor out, Var x, int M, int N) {
        return push_op(std::move(out), "softmax", {x}, [x, M, N](Tape& t, Var self) {
            const Tensor &g = t.nodes_[self].grad, &y = t.nodes_[self].value;
            Tensor& gx = t.nodes_[x].grad;
            for (int j = 0; j < N; ++j) {
                double dot = 0.0;
                for (int i = 0; i < M; ++i) dot += g.at(i, j) * y.at(i, j);
                for (int i = 0; i < M; ++i) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        });
    }

    std::vector<Node> nodes_;
};

}  // namespace sda
