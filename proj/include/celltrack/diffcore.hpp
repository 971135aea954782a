#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors:
// just enough primitives to express and train the graph similarity model and
// the 3D convolutional division classifier. Dynamic tape, no broadcasting
// beyond bias-add, single-threaded and bit-deterministic.

#include "celltrack/core.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace celltrack::diff {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(numel_of(shape), 0.0); }
    Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {
        if (v.size() != numel_of(shape)) throw DimensionError("Tensor: value count != product of extents");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int e : s) {
            if (e < 1) throw DimensionError("Tensor: extent < 1");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }
    std::size_t numel() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;
};

// Named trainable tensor with persistent gradient and optimizer state.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor slot_m, slot_v;  // momentum / first and second moments
    std::int64_t steps = 0;

    Parameter() = default;
    Parameter(std::string n, Tensor val) : name(std::move(n)), value(std::move(val)) {
        grad = Tensor(value.shape);
        slot_m = Tensor(value.shape);
        slot_v = Tensor(value.shape);
    }
};

// Backprop closures receive the output gradient and add into parent grads.
class Tape {
public:
    using Backprop = std::function<void(Tape&, const Tensor&)>;

    Var constant(Tensor t) { return push(std::move(t), false); }

    Var leaf(Parameter& p) {
        Var v = push(p.value, true);
        nodes_[v.idx].param = &p;
        return v;
    }

    const Tensor& val(Var v) const { return nodes_.at(v.idx).val; }
    bool requires_grad(Var v) const { return nodes_.at(v.idx).requires_grad; }
    Tensor& grad_of(Var v) { return ensure_grad(v.idx); }

    Var make(const char* op, Tensor out, const std::vector<Var>& parents, Backprop backprop) {
        if (!out.all_finite()) throw TrainingError(std::string("non-finite output of primitive ") + op);
        bool rg = false;
        for (Var p : parents) rg = rg || nodes_[p.idx].requires_grad;
        Var v = push(std::move(out), rg);
        if (rg) nodes_[v.idx].backprop = std::move(backprop);
        return v;
    }

    // Reverse sweep from a scalar loss node. Gradients of parameter leaves
    // accumulate into Parameter::grad; parameters not reachable from the
    // loss are simply not touched.
    void backward(Var loss) {
        if (loss.tape != this) throw ArgumentError("backward: loss from another tape");
        Node& ln = nodes_.at(loss.idx);
        if (ln.val.numel() != 1) throw ArgumentError("backward: loss must be scalar");
        ensure_grad(loss.idx).v[0] += 1.0;
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.v.empty()) continue;
            if (n.backprop) n.backprop(*this, n.grad);
            if (n.param)
                for (std::size_t j = 0; j < n.grad.v.size(); ++j) n.param->grad.v[j] += n.grad.v[j];
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        Backprop backprop;
        Parameter* param = nullptr;
    };

    Var push(Tensor t, bool rg) {
        Node n;
        n.val = std::move(t);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size() - 1)};
    }

    Tensor& ensure_grad(int idx) {
        Node& n = nodes_.at(idx);
        if (n.grad.v.empty()) n.grad = Tensor(n.val.shape);
        return n.grad;
    }

    std::vector<Node> nodes_;
};

namespace detail {
inline void check2d(const Tensor& t, const char* op) {
    if (t.shape.size() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor");
}
inline void accumulate(Tensor& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst.v[i] += src[i];
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    const Tensor& B = tp.val(b);
    detail::check2d(A, "matmul");
    detail::check2d(B, "matmul");
    if (A.cols() != B.rows()) throw DimensionError("matmul: inner extents differ");
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C({m, n});
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = A.at(i, l);
            for (int j = 0; j < n; ++j) C.at(i, j) += av * B.at(l, j);
        }
    return tp.make("matmul", std::move(C), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& dC) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        if (t.requires_grad(a)) {
            Tensor& dA = t.grad_of(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = dC.at(i, j);
                    for (int l = 0; l < k; ++l) dA.at(i, l) += g * B.at(l, j);
                }
        }
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_of(b);
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    const double av = A.at(i, l);
                    for (int j = 0; j < n; ++j) dB.at(l, j) += av * dC.at(i, j);
                }
        }
    });
}

// Same-shape addition, or bias-add of a [1 x n] row onto an [m x n] matrix.
inline Var add(Var a, Var b) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    const Tensor& B = tp.val(b);
    const bool bias = A.shape.size() == 2 && B.shape.size() == 2 && B.rows() == 1 &&
                      A.cols() == B.cols() && A.rows() != 1;
    if (!bias && !A.same_shape(B)) throw DimensionError("add: shape mismatch");
    Tensor C = A;
    if (bias) {
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < A.cols(); ++j) C.at(i, j) += B.at(0, j);
    } else {
        for (std::size_t i = 0; i < C.v.size(); ++i) C.v[i] += B.v[i];
    }
    return tp.make("add", std::move(C), {a, b}, [a, b, bias](Tape& t, const Tensor& dC) {
        if (t.requires_grad(a)) detail::accumulate(t.grad_of(a), dC.v);
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_of(b);
            if (bias) {
                const int m = dC.rows(), n = dC.cols();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dB.at(0, j) += dC.at(i, j);
            } else {
                detail::accumulate(dB, dC.v);
            }
        }
    });
}

inline Var sub(Var a, Var b) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    const Tensor& B = tp.val(b);
    if (!A.same_shape(B)) throw DimensionError("sub: shape mismatch");
    Tensor C = A;
    for (std::size_t i = 0; i < C.v.size(); ++i) C.v[i] -= B.v[i];
    return tp.make("sub", std::move(C), {a, b}, [a, b](Tape& t, const Tensor& dC) {
        if (t.requires_grad(a)) detail::accumulate(t.grad_of(a), dC.v);
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_of(b);
            for (std::size_t i = 0; i < dC.v.size(); ++i) dB.v[i] -= dC.v[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    const Tensor& B = tp.val(b);
    if (!A.same_shape(B)) throw DimensionError("mul: shape mismatch");
    Tensor C = A;
    for (std::size_t i = 0; i < C.v.size(); ++i) C.v[i] *= B.v[i];
    return tp.make("mul", std::move(C), {a, b}, [a, b](Tape& t, const Tensor& dC) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        if (t.requires_grad(a)) {
            Tensor& dA = t.grad_of(a);
            for (std::size_t i = 0; i < dC.v.size(); ++i) dA.v[i] += dC.v[i] * B.v[i];
        }
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_of(b);
            for (std::size_t i = 0; i < dC.v.size(); ++i) dB.v[i] += dC.v[i] * A.v[i];
        }
    });
}

// alpha * x + beta, elementwise constants.
inline Var affine(Var a, double alpha, double beta) {
    Tape& tp = *a.tape;
    Tensor C = tp.val(a);
    for (double& x : C.v) x = alpha * x + beta;
    return tp.make("affine", std::move(C), {a}, [a, alpha](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        Tensor& dA = t.grad_of(a);
        for (std::size_t i = 0; i < dC.v.size(); ++i) dA.v[i] += alpha * dC.v[i];
    });
}

inline Var relu(Var a) {
    Tape& tp = *a.tape;
    Tensor C = tp.val(a);
    for (double& x : C.v) x = x > 0.0 ? x : 0.0;
    return tp.make("relu", std::move(C), {a}, [a](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        const Tensor& A = t.val(a);
        Tensor& dA = t.grad_of(a);
        for (std::size_t i = 0; i < dC.v.size(); ++i)
            if (A.v[i] > 0.0) dA.v[i] += dC.v[i];
    });
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    Tape& tp = *a.tape;
    Tensor C = tp.val(a);
    for (double& x : C.v) x = sigmoid_scalar(x);
    return tp.make("sigmoid", std::move(C), {a}, [a](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        const Tensor& A = t.val(a);
        Tensor& dA = t.grad_of(a);
        for (std::size_t i = 0; i < dC.v.size(); ++i) {
            const double s = sigmoid_scalar(A.v[i]);
            dA.v[i] += dC.v[i] * s * (1.0 - s);
        }
    });
}

// Row-wise dot product of two [m x d] matrices -> [m x 1].
inline Var dot(Var a, Var b) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    const Tensor& B = tp.val(b);
    detail::check2d(A, "dot");
    if (!A.same_shape(B)) throw DimensionError("dot: shape mismatch");
    const int m = A.rows(), d = A.cols();
    Tensor C({m, 1});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += A.at(i, j) * B.at(i, j);
        C.at(i, 0) = s;
    }
    return tp.make("dot", std::move(C), {a, b}, [a, b, m, d](Tape& t, const Tensor& dC) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        if (t.requires_grad(a)) {
            Tensor& dA = t.grad_of(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j) dA.at(i, j) += dC.at(i, 0) * B.at(i, j);
        }
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_of(b);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j) dB.at(i, j) += dC.at(i, 0) * A.at(i, j);
        }
    });
}

// Concatenation of 2-D tensors along axis 0 (rows) or 1 (columns).
inline Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ArgumentError("concat: no inputs");
    Tape& tp = *parts.front().tape;
    for (Var p : parts) detail::check2d(tp.val(p), "concat");
    const Tensor& first = tp.val(parts[0]);
    int total = 0;
    for (Var p : parts) {
        const Tensor& t = tp.val(p);
        if (axis == 0 && t.cols() != first.cols()) throw DimensionError("concat: column mismatch");
        if (axis == 1 && t.rows() != first.rows()) throw DimensionError("concat: row mismatch");
        total += axis == 0 ? t.rows() : t.cols();
    }
    Tensor C(axis == 0 ? std::vector<int>{total, first.cols()} : std::vector<int>{first.rows(), total});
    int offset = 0;
    for (Var p : parts) {
        const Tensor& t = tp.val(p);
        if (axis == 0) {
            std::copy(t.v.begin(), t.v.end(), C.v.begin() + static_cast<std::ptrdiff_t>(offset) * C.cols());
            offset += t.rows();
        } else {
            for (int i = 0; i < t.rows(); ++i)
                for (int j = 0; j < t.cols(); ++j) C.at(i, offset + j) = t.at(i, j);
            offset += t.cols();
        }
    }
    return tp.make("concat", std::move(C), parts, [parts_copy = parts, axis](Tape& t, const Tensor& dC) {
        int offset = 0;
        for (Var p : parts_copy) {
            const Tensor& pv = t.val(p);
            const int pr = pv.rows(), pc = pv.cols();
            if (t.requires_grad(p)) {
                Tensor& dP = t.grad_of(p);
                if (axis == 0) {
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < pc; ++j) dP.at(i, j) += dC.at(offset + i, j);
                } else {
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < pc; ++j) dP.at(i, j) += dC.at(i, offset + j);
                }
            }
            offset += axis == 0 ? pr : pc;
        }
    });
}

// Row gather: out[r, :] = a[indices[r], :]. Adjoint scatters (accumulating).
inline Var gather_rows(Var a, std::vector<int> indices) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    detail::check2d(A, "gather_rows");
    const int d = A.cols();
    Tensor C({static_cast<int>(indices.size()), d});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const int src = indices[r];
        if (src < 0 || src >= A.rows()) throw DimensionError("gather_rows: index out of range");
        for (int j = 0; j < d; ++j) C.at(static_cast<int>(r), j) = A.at(src, j);
    }
    return tp.make("gather_rows", std::move(C), {a},
                   [a, idxs = std::move(indices), d](Tape& t, const Tensor& dC) {
                       if (!t.requires_grad(a)) return;
                       Tensor& dA = t.grad_of(a);
                       for (std::size_t r = 0; r < idxs.size(); ++r)
                           for (int j = 0; j < d; ++j)
                               dA.at(idxs[r], j) += dC.at(static_cast<int>(r), j);
                   });
}

// Column-wise max over row groups: out[g, :] = max over rows in groups[g].
// Gradient routes to the first maximal row of each group.
inline Var max_over_neighbors(Var a, std::vector<std::vector<int>> groups) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    detail::check2d(A, "max_over_neighbors");
    const int d = A.cols();
    const int g = static_cast<int>(groups.size());
    Tensor C({g, d});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(g) * d, -1);
    for (int r = 0; r < g; ++r) {
        if (groups[r].empty()) throw ArgumentError("max_over_neighbors: empty group");
        for (int j = 0; j < d; ++j) {
            double best = -std::numeric_limits<double>::infinity();
            int best_row = -1;
            for (int row : groups[r]) {
                if (row < 0 || row >= A.rows())
                    throw DimensionError("max_over_neighbors: row index out of range");
                const double x = A.at(row, j);
                if (x > best) {
                    best = x;
                    best_row = row;
                }
            }
            C.at(r, j) = best;
            (*argmax)[static_cast<std::size_t>(r) * d + j] = best_row;
        }
    }
    return tp.make("max_over_neighbors", std::move(C), {a},
                   [a, argmax, g, d](Tape& t, const Tensor& dC) {
                       if (!t.requires_grad(a)) return;
                       Tensor& dA = t.grad_of(a);
                       for (int r = 0; r < g; ++r)
                           for (int j = 0; j < d; ++j)
                               dA.at((*argmax)[static_cast<std::size_t>(r) * d + j], j) += dC.at(r, j);
                   });
}

// Mean over rows: [m x d] -> [1 x d].
inline Var mean_pool(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    detail::check2d(A, "mean_pool");
    const int m = A.rows(), d = A.cols();
    Tensor C({1, d});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) C.at(0, j) += A.at(i, j);
    for (int j = 0; j < d; ++j) C.at(0, j) /= static_cast<double>(m);
    return tp.make("mean_pool", std::move(C), {a}, [a, m, d](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        Tensor& dA = t.grad_of(a);
        const double inv = 1.0 / static_cast<double>(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) dA.at(i, j) += dC.at(0, j) * inv;
    });
}

// Max over all elements -> [1 x 1]; gradient routes to the first maximum.
inline Var reduce_max(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    if (A.numel() == 0) throw ArgumentError("reduce_max: empty tensor");
    std::size_t best_i = 0;
    for (std::size_t i = 1; i < A.v.size(); ++i)
        if (A.v[i] > A.v[best_i]) best_i = i;
    Tensor C({1, 1});
    C.v[0] = A.v[best_i];
    return tp.make("reduce_max", std::move(C), {a}, [a, best_i](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        t.grad_of(a).v[best_i] += dC.v[0];
    });
}

// Sum of all elements -> [1 x 1].
inline Var sum_all(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    Tensor C({1, 1});
    for (double x : A.v) C.v[0] += x;
    return tp.make("sum_all", std::move(C), {a}, [a](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        Tensor& dA = t.grad_of(a);
        for (double& x : dA.v) x += dC.v[0];
    });
}

inline Var flatten(Var a) {
    Tape& tp = *a.tape;
    const Tensor& A = tp.val(a);
    Tensor C({1, static_cast<int>(A.numel())}, A.v);
    return tp.make("flatten", std::move(C), {a}, [a](Tape& t, const Tensor& dC) {
        if (!t.requires_grad(a)) return;
        detail::accumulate(t.grad_of(a), dC.v);
    });
}

// 3-D convolution. x: [C, D, H, W]; w: [Co, C, k, k, k]; bias: [1, Co].
inline Var conv3d(Var x, Var w, Var bias, int stride, int padding) {
    Tape& tp = *x.tape;
    const Tensor& X = tp.val(x);
    const Tensor& W = tp.val(w);
    const Tensor& B = tp.val(bias);
    if (X.shape.size() != 4) throw DimensionError("conv3d: input must be [C,D,H,W]");
    if (W.shape.size() != 5) throw DimensionError("conv3d: weight must be [Co,C,kd,kh,kw]");
    if (stride < 1 || padding < 0) throw ArgumentError("conv3d: bad stride/padding");
    const int ci = X.shape[0], di = X.shape[1], hi = X.shape[2], wi = X.shape[3];
    const int co = W.shape[0], kd = W.shape[2], kh = W.shape[3], kw = W.shape[4];
    if (W.shape[1] != ci) throw DimensionError("conv3d: channel mismatch");
    if (B.numel() != static_cast<std::size_t>(co)) throw DimensionError("conv3d: bias size mismatch");
    const int od = (di + 2 * padding - kd) / stride + 1;
    const int oh = (hi + 2 * padding - kh) / stride + 1;
    const int ow = (wi + 2 * padding - kw) / stride + 1;
    if (od < 1 || oh < 1 || ow < 1) throw DimensionError("conv3d: output collapses to zero extent");

    auto xat = [&](const Tensor& T, int c, int d, int h, int ww_) {
        return T.v[((static_cast<std::size_t>(c) * di + d) * hi + h) * wi + ww_];
    };
    auto wat = [&](const Tensor& T, int o, int c, int a, int b, int cc) {
        return T.v[(((static_cast<std::size_t>(o) * ci + c) * kd + a) * kh + b) * kw + cc];
    };

    Tensor Y({co, od, oh, ow});
    std::size_t yi = 0;
    for (int o = 0; o < co; ++o)
        for (int zd = 0; zd < od; ++zd)
            for (int zh = 0; zh < oh; ++zh)
                for (int zw = 0; zw < ow; ++zw, ++yi) {
                    double acc = B.v[o];
                    for (int c = 0; c < ci; ++c)
                        for (int a = 0; a < kd; ++a) {
                            const int dz = zd * stride - padding + a;
                            if (dz < 0 || dz >= di) continue;
                            for (int b = 0; b < kh; ++b) {
                                const int hz = zh * stride - padding + b;
                                if (hz < 0 || hz >= hi) continue;
                                for (int cc = 0; cc < kw; ++cc) {
                                    const int wz = zw * stride - padding + cc;
                                    if (wz < 0 || wz >= wi) continue;
                                    acc += xat(X, c, dz, hz, wz) * wat(W, o, c, a, b, cc);
                                }
                            }
                        }
                    Y.v[yi] = acc;
                }

    return tp.make("conv3d", std::move(Y), {x, w, bias},
                   [x, w, bias, stride, padding, ci, di, hi, wi, co, kd, kh, kw, od, oh, ow](
                       Tape& t, const Tensor& dY) {
                       const Tensor& X = t.val(x);
                       const Tensor& W = t.val(w);
                       const bool gx = t.requires_grad(x), gw = t.requires_grad(w),
                                  gb = t.requires_grad(bias);
                       Tensor* dX = gx ? &t.grad_of(x) : nullptr;
                       Tensor* dW = gw ? &t.grad_of(w) : nullptr;
                       Tensor* dB = gb ? &t.grad_of(bias) : nullptr;
                       auto xoff = [&](int c, int d, int h, int ww_) {
                           return ((static_cast<std::size_t>(c) * di + d) * hi + h) * wi + ww_;
                       };
                       auto woff = [&](int o, int c, int a, int b, int cc) {
                           return (((static_cast<std::size_t>(o) * ci + c) * kd + a) * kh + b) * kw + cc;
                       };
                       std::size_t yi = 0;
                       for (int o = 0; o < co; ++o)
                           for (int zd = 0; zd < od; ++zd)
                               for (int zh = 0; zh < oh; ++zh)
                                   for (int zw = 0; zw < ow; ++zw, ++yi) {
                                       const double g = dY.v[yi];
                                       if (g == 0.0) continue;
                                       if (dB) dB->v[o] += g;
                                       for (int c = 0; c < ci; ++c)
                                           for (int a = 0; a < kd; ++a) {
                                               const int dz = zd * stride - padding + a;
                                               if (dz < 0 || dz >= di) continue;
                                               for (int b = 0; b < kh; ++b) {
                                                   const int hz = zh * stride - padding + b;
                                                   if (hz < 0 || hz >= hi) continue;
                                                   for (int cc = 0; cc < kw; ++cc) {
                                                       const int wz = zw * stride - padding + cc;
                                                       if (wz < 0 || wz >= wi) continue;
                                                       if (dW)
                                                           dW->v[woff(o, c, a, b, cc)] +=
                                                               g * X.v[xoff(c, dz, hz, wz)];
                                                       if (dX)
                                                           dX->v[xoff(c, dz, hz, wz)] +=
                                                               g * W.v[woff(o, c, a, b, cc)];
                                                   }
                                               }
                                           }
                                   }
                   });
}

// Summed binary cross entropy computed in log space from pre-sigmoid values.
inline Var bce_with_logits(Var z, Tensor targets) {
    Tape& tp = *z.tape;
    const Tensor& Z = tp.val(z);
    if (Z.numel() != targets.numel()) throw DimensionError("bce_with_logits: target size mismatch");
    Tensor C({1, 1});
    double loss = 0.0;
    for (std::size_t i = 0; i < Z.v.size(); ++i) {
        const double zz = Z.v[i], t = targets.v[i];
        loss += std::max(zz, 0.0) - zz * t + std::log1p(std::exp(-std::abs(zz)));
    }
    C.v[0] = loss;
    return tp.make("bce_with_logits", std::move(C), {z},
                   [z, tg = std::move(targets)](Tape& t, const Tensor& dC) {
                       if (!t.requires_grad(z)) return;
                       const Tensor& Z = t.val(z);
                       Tensor& dZ = t.grad_of(z);
                       for (std::size_t i = 0; i < Z.v.size(); ++i)
                           dZ.v[i] += dC.v[0] * (sigmoid_scalar(Z.v[i]) - tg.v[i]);
                   });
}

// Cross entropy of softmax-normalized scores against a ground-truth index.
inline Var softmax_cross_entropy(Var scores, int gt_index) {
    Tape& tp = *scores.tape;
    const Tensor& S = tp.val(scores);
    const int n = static_cast<int>(S.numel());
    if (gt_index < 0 || gt_index >= n) throw ArgumentError("softmax_cross_entropy: GT index out of range");
    double mx = S.v[0];
    for (double x : S.v) mx = std::max(mx, x);
    double lse = 0.0;
    for (double x : S.v) lse += std::exp(x - mx);
    lse = mx + std::log(lse);
    Tensor C({1, 1});
    C.v[0] = lse - S.v[gt_index];
    return tp.make("softmax_cross_entropy", std::move(C), {scores},
                   [scores, gt_index, mx, lse](Tape& t, const Tensor& dC) {
                       if (!t.requires_grad(scores)) return;
                       const Tensor& S = t.val(scores);
                       Tensor& dS = t.grad_of(scores);
                       for (std::size_t i = 0; i < S.v.size(); ++i) {
                           const double p = std::exp(S.v[i] - lse);
                           dS.v[i] += dC.v[0] * (p - (static_cast<int>(i) == gt_index ? 1.0 : 0.0));
                       }
                   });
}

// ---------------------------------------------------------------------------
// Parameters, optimizer, checkpoints
// ---------------------------------------------------------------------------

struct ParamStore {
    std::map<std::string, Parameter> params;  // name-ordered, so serialization is stable

    Parameter& add(const std::string& name, Tensor init) {
        auto [it, fresh] = params.emplace(name, Parameter(name, std::move(init)));
        if (!fresh) throw ArgumentError("ParamStore: duplicate parameter " + name);
        return it->second;
    }
    Parameter& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ArgumentError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Parameter& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ArgumentError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    void zero_grad() {
        for (auto& [_, p] : params) std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
    }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params) n += p.value.numel();
        return n;
    }
};

// Xavier-uniform initialization for a [fan_in x fan_out] matrix.
inline Tensor xavier_init(int rows, int cols, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t({rows, cols});
    for (double& x : t.v) x = dist(rng);
    return t;
}

struct OptimConfig {
    enum class Kind { sgd_momentum, adam };
    Kind kind = Kind::sgd_momentum;
    double lr = 0.01;
    double momentum = 0.9;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One first-order update over every parameter in the store. Throws
// TrainingError naming the parameter if any gradient is non-finite.
inline void optim_step(ParamStore& store, const OptimConfig& cfg) {
    for (auto& [name, p] : store.params) {
        if (!p.grad.all_finite())
            throw TrainingError("optim_step: non-finite gradient in parameter " + name);
        p.steps++;
        if (cfg.kind == OptimConfig::Kind::sgd_momentum) {
            for (std::size_t i = 0; i < p.value.v.size(); ++i) {
                p.slot_m.v[i] = cfg.momentum * p.slot_m.v[i] + p.grad.v[i];
                p.value.v[i] -= cfg.lr * p.slot_m.v[i];
            }
        } else {
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.steps));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.steps));
            for (std::size_t i = 0; i < p.value.v.size(); ++i) {
                p.slot_m.v[i] = cfg.beta1 * p.slot_m.v[i] + (1.0 - cfg.beta1) * p.grad.v[i];
                p.slot_v.v[i] = cfg.beta2 * p.slot_v.v[i] + (1.0 - cfg.beta2) * p.grad.v[i] * p.grad.v[i];
                const double mhat = p.slot_m.v[i] / bc1;
                const double vhat = p.slot_v.v[i] / bc2;
                p.value.v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
        if (!p.value.all_finite())
            throw TrainingError("optim_step: non-finite value in parameter " + name);
    }
}

// Checkpoint format: `<prefix>.json` manifest (names, shapes, hyper) plus
// `<prefix>.bin`, the concatenated parameter values as little-endian 32-bit
// floats in manifest order. Save -> load -> save is byte-identical.
inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& prefix,
                            const nlohmann::json& hyper = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format"] = "celltrack-checkpoint-v1";
    manifest["hyper"] = hyper;
    auto params = nlohmann::json::array();
    std::vector<unsigned char> payload;
    for (const auto& [name, p] : store.params) {
        params.push_back({{"name", name}, {"shape", p.value.shape}});
        for (double x : p.value.v) {
            const float f = static_cast<float>(x);
            static_assert(sizeof(float) == 4);
            unsigned char b[4];
            std::memcpy(b, &f, 4);
            payload.insert(payload.end(), b, b + 4);
        }
    }
    manifest["params"] = params;

    std::filesystem::path mpath = prefix;
    mpath += ".json";
    std::ofstream mj(mpath, std::ios::trunc);
    if (!mj) throw FormatError("save_checkpoint: cannot write " + mpath.string());
    mj << manifest.dump(2) << "\n";

    std::filesystem::path bpath = prefix;
    bpath += ".bin";
    std::ofstream bin(bpath, std::ios::binary | std::ios::trunc);
    if (!bin) throw FormatError("save_checkpoint: cannot write " + bpath.string());
    bin.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

inline ParamStore load_checkpoint(const std::filesystem::path& prefix,
                                  nlohmann::json* hyper_out = nullptr) {
    std::filesystem::path mpath = prefix;
    mpath += ".json";
    std::ifstream mj(mpath);
    if (!mj) throw CheckpointError("load_checkpoint: missing manifest " + mpath.string());
    nlohmann::json manifest;
    try {
        mj >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_checkpoint: bad manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "celltrack-checkpoint-v1")
        throw FormatError("load_checkpoint: unknown format tag");
    if (hyper_out) *hyper_out = manifest.value("hyper", nlohmann::json::object());

    std::filesystem::path bpath = prefix;
    bpath += ".bin";
    std::ifstream bin(bpath, std::ios::binary | std::ios::ate);
    if (!bin) throw CheckpointError("load_checkpoint: missing payload " + bpath.string());
    const auto length = static_cast<std::size_t>(bin.tellg());
    bin.seekg(0);
    std::vector<unsigned char> payload(length);
    bin.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(length));
    if (!bin) throw FormatError("load_checkpoint: short read");

    ParamStore store;
    std::size_t offset = 0;
    for (const auto& pj : manifest.at("params")) {
        const std::string name = pj.at("name").get<std::string>();
        const std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        if (offset + t.numel() * 4 > payload.size())
            throw FormatError("load_checkpoint: payload shorter than manifest shapes");
        for (std::size_t i = 0; i < t.numel(); ++i) {
            float f;
            std::memcpy(&f, payload.data() + offset, 4);
            offset += 4;
            t.v[i] = static_cast<double>(f);
        }
        store.add(name, std::move(t));
    }
    if (offset != payload.size()) throw FormatError("load_checkpoint: trailing payload bytes");
    return store;
}

}  // namespace celltrack::diff
