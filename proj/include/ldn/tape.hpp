#pragma once

// Reverse-mode differentiation over dense matrices. Nodes are recorded
// eagerly with their forward value saved; backward() walks the list in
// reverse (creation order is a topological order) and accumulates
// gradients by the chain rule. Nodes the loss never reaches keep a zero
// gradient. A tape is single-writer; use one tape per sample or batch.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ldn/matrix.hpp"

namespace ldn {

struct Var {
    int id = -1;
};

enum class OpKind {
    Leaf,
    MatMul,     // A[m×k] · B[k×n]
    Add,        // A + B, same shape
    Sub,        // A - B
    Mul,        // A ⊙ B elementwise
    ScaleConst, // k · A
    AddConst,   // A + constant matrix
    MulConst,   // A ⊙ constant matrix (masking)
    MulScalar,  // A · s where s is a 1×1 node
    DivScalar,  // A / s where s is a 1×1 node
    Cwise,      // softplus | sigmoid | tanh | exp, elementwise
    Clamp,      // clamp entries to [lo, hi]
    Transpose,
    ConcatCols, // [A | B] row-wise concatenation of columns
    AddRowVec,  // X[T×d] with v[d×1] added to every row
    RowScale,   // X[T×d] with row t scaled by r[t], r[T×1]
    GatherRows, // rows of a table selected by index list
    PairGate,   // G[t][s] = sigmoid(Σ_i w_i tanh(P[t][i] + Q[s][i]) + b)
    GaussDecay, // D[t][s] = exp(-(t-s)² / (2 σ²)), σ = exp(log_scale)
    MaxFloor,   // 1×1: max(max entry, floor)
    RowSums,    // X[T×c] -> T×1
    MeanRows,   // X[T×d] -> d×1 column-wise mean over rows
    LayerNorm,  // per-row normalization with affine gamma/beta [d×1]
    SoftmaxXent,// -log softmax(logits)[label], logits [C×1]
    SumAll,     // 1×1 sum of all entries
};

class Tape {
public:
    // Test hook: scales the gate-weight gradient produced by PairGate's
    // backward rule, so the gradient checker can be shown to localize a
    // deliberately broken rule. 1.0 means intact.
    double pair_gate_w_grad_scale = 1.0;

    Var leaf(Matrix value) {
        Node n;
        n.op = OpKind::Leaf;
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var matmul(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        Node n = binary(OpKind::MatMul, a, b);
        n.value = ldn::matmul(av, bv);
        return push(std::move(n));
    }

    Var add(Var a, Var b) {
        Node n = binary(OpKind::Add, a, b);
        n.value = ldn::add(value(a), value(b));
        return push(std::move(n));
    }

    Var sub(Var a, Var b) {
        Node n = binary(OpKind::Sub, a, b);
        n.value = ldn::sub(value(a), value(b));
        return push(std::move(n));
    }

    Var mul(Var a, Var b) {
        Node n = binary(OpKind::Mul, a, b);
        n.value = hadamard(value(a), value(b));
        return push(std::move(n));
    }

    Var scale(Var a, double k) {
        Node n = unary(OpKind::ScaleConst, a);
        n.s0 = k;
        n.value = scaled(value(a), k);
        return push(std::move(n));
    }

    Var add_const(Var a, Matrix m) {
        Node n = unary(OpKind::AddConst, a);
        n.value = ldn::add(value(a), m);
        n.aux = std::move(m);
        return push(std::move(n));
    }

    Var mul_const(Var a, Matrix m) {
        Node n = unary(OpKind::MulConst, a);
        n.value = hadamard(value(a), m);
        n.aux = std::move(m);
        return push(std::move(n));
    }

    Var mul_scalar(Var x, Var s) {
        require_scalar(s, "mul_scalar");
        Node n = binary(OpKind::MulScalar, x, s);
        n.value = scaled(value(x), value(s)(0, 0));
        return push(std::move(n));
    }

    Var div_scalar(Var x, Var s) {
        require_scalar(s, "div_scalar");
        const double sv = value(s)(0, 0);
        if (sv == 0.0) throw InputError("div_scalar: division by zero");
        Node n = binary(OpKind::DivScalar, x, s);
        n.value = scaled(value(x), 1.0 / sv);
        return push(std::move(n));
    }

    Var cwise(Unary f, Var x) {
        Node n = unary(OpKind::Cwise, x);
        n.i0 = static_cast<int>(f);
        n.value = elementwise(f, value(x));
        return push(std::move(n));
    }

    Var clamp(Var x, double lo, double hi) {
        Node n = unary(OpKind::Clamp, x);
        n.s0 = lo;
        n.s1 = hi;
        n.value = value(x);
        for (std::size_t i = 0; i < n.value.size(); ++i)
            n.value[i] = std::min(hi, std::max(lo, n.value[i]));
        return push(std::move(n));
    }

    Var transpose(Var x) {
        Node n = unary(OpKind::Transpose, x);
        n.value = ldn::transpose(value(x));
        return push(std::move(n));
    }

    Var concat_cols(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.rows() != bv.rows())
            throw ShapeError("concat_cols: row counts disagree: " + av.shape() + " vs " + bv.shape());
        Node n = binary(OpKind::ConcatCols, a, b);
        n.value = Matrix(av.rows(), av.cols() + bv.cols());
        for (int i = 0; i < av.rows(); ++i) {
            for (int j = 0; j < av.cols(); ++j) n.value(i, j) = av(i, j);
            for (int j = 0; j < bv.cols(); ++j) n.value(i, av.cols() + j) = bv(i, j);
        }
        return push(std::move(n));
    }

    Var add_row_vec(Var x, Var v) {
        const Matrix& xv = value(x);
        const Matrix& vv = value(v);
        if (vv.cols() != 1 || vv.rows() != xv.cols())
            throw ShapeError("add_row_vec: want " + shape_string(xv.cols(), 1) + ", got " + vv.shape());
        Node n = binary(OpKind::AddRowVec, x, v);
        n.value = xv;
        for (int i = 0; i < xv.rows(); ++i)
            for (int j = 0; j < xv.cols(); ++j) n.value(i, j) += vv(j, 0);
        return push(std::move(n));
    }

    Var row_scale(Var x, Var r) {
        const Matrix& xv = value(x);
        const Matrix& rv = value(r);
        if (rv.cols() != 1 || rv.rows() != xv.rows())
            throw ShapeError("row_scale: want " + shape_string(xv.rows(), 1) + ", got " + rv.shape());
        Node n = binary(OpKind::RowScale, x, r);
        n.value = xv;
        for (int i = 0; i < xv.rows(); ++i)
            for (int j = 0; j < xv.cols(); ++j) n.value(i, j) *= rv(i, 0);
        return push(std::move(n));
    }

    Var gather_rows(Var table, std::vector<int> ids) {
        const Matrix& tv = value(table);
        if (ids.empty()) throw InputError("gather_rows: empty index list");
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] < 0 || ids[i] >= tv.rows())
                throw InputError("gather_rows: index " + std::to_string(ids[i]) + " at position " +
                                 std::to_string(i) + " outside table with " + std::to_string(tv.rows()) + " rows");
        Node n = unary(OpKind::GatherRows, table);
        n.value = Matrix(static_cast<int>(ids.size()), tv.cols());
        for (int t = 0; t < n.value.rows(); ++t)
            for (int j = 0; j < tv.cols(); ++j) n.value(t, j) = tv(ids[t], j);
        n.ids = std::move(ids);
        return push(std::move(n));
    }

    Var pair_gate(Var p, Var q, Var w, Var b) {
        const Matrix& pv = value(p);
        const Matrix& qv = value(q);
        const Matrix& wv = value(w);
        require_same_shape(pv, qv, "pair_gate");
        if (wv.cols() != 1 || wv.rows() != pv.cols())
            throw ShapeError("pair_gate: gate weight wants " + shape_string(pv.cols(), 1) + ", got " + wv.shape());
        require_scalar(b, "pair_gate bias");
        const int t_len = pv.rows();
        const int hidden = pv.cols();
        const double bias = value(b)(0, 0);
        Node n;
        n.op = OpKind::PairGate;
        n.a = p.id;
        n.b = q.id;
        n.c = w.id;
        n.d = b.id;
        n.value = Matrix(t_len, t_len);
        for (int t = 0; t < t_len; ++t) {
            for (int s = 0; s < t_len; ++s) {
                double acc = bias;
                for (int i = 0; i < hidden; ++i)
                    acc += wv(i, 0) * std::tanh(pv(t, i) + qv(s, i));
                n.value(t, s) = sigmoid(acc);
            }
        }
        return push(std::move(n));
    }

    Var gauss_decay(Var log_scale, int t_len) {
        require_scalar(log_scale, "gauss_decay");
        if (t_len < 1) throw InputError("gauss_decay: sequence length must be positive");
        const double sigma = std::exp(value(log_scale)(0, 0));
        Node n = unary(OpKind::GaussDecay, log_scale);
        n.i0 = t_len;
        n.value = Matrix(t_len, t_len);
        for (int t = 0; t < t_len; ++t)
            for (int s = 0; s < t_len; ++s) {
                const double delta = static_cast<double>(t - s);
                n.value(t, s) = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
            }
        return push(std::move(n));
    }

    Var max_floor(Var x, double floor) {
        const Matrix& xv = value(x);
        Node n = unary(OpKind::MaxFloor, x);
        n.s0 = floor;
        double best = floor;
        int best_i = -1;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (xv[i] > best) {
                best = xv[i];
                best_i = static_cast<int>(i);
            }
        }
        n.i0 = best_i; // -1 when the floor wins; no gradient then
        n.value = Matrix(1, 1, best);
        return push(std::move(n));
    }

    Var row_sums(Var x) {
        const Matrix& xv = value(x);
        Node n = unary(OpKind::RowSums, x);
        n.value = Matrix(xv.rows(), 1);
        for (int i = 0; i < xv.rows(); ++i) {
            double s = 0.0;
            for (int j = 0; j < xv.cols(); ++j) s += xv(i, j);
            n.value(i, 0) = s;
        }
        return push(std::move(n));
    }

    Var mean_rows(Var x) {
        const Matrix& xv = value(x);
        Node n = unary(OpKind::MeanRows, x);
        n.value = Matrix(xv.cols(), 1);
        for (int j = 0; j < xv.cols(); ++j) {
            double s = 0.0;
            for (int i = 0; i < xv.rows(); ++i) s += xv(i, j);
            n.value(j, 0) = s / xv.rows();
        }
        return push(std::move(n));
    }

    Var layer_norm(Var x, Var gamma, Var beta) {
        const Matrix& xv = value(x);
        const Matrix& gv = value(gamma);
        const Matrix& bv = value(beta);
        if (gv.cols() != 1 || gv.rows() != xv.cols())
            throw ShapeError("layer_norm: gamma wants " + shape_string(xv.cols(), 1) + ", got " + gv.shape());
        if (bv.cols() != 1 || bv.rows() != xv.cols())
            throw ShapeError("layer_norm: beta wants " + shape_string(xv.cols(), 1) + ", got " + bv.shape());
        const int rows = xv.rows(), d = xv.cols();
        Node n;
        n.op = OpKind::LayerNorm;
        n.a = x.id;
        n.b = gamma.id;
        n.c = beta.id;
        n.aux = Matrix(rows, d);  // normalized rows, reused in backward
        n.aux2 = Matrix(rows, 1); // per-row 1/sqrt(var + eps)
        n.value = Matrix(rows, d);
        for (int i = 0; i < rows; ++i) {
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += xv(i, j);
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double c = xv(i, j) - mean;
                var += c * c;
            }
            var /= d; // population variance over the features
            const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
            n.aux2(i, 0) = inv_std;
            for (int j = 0; j < d; ++j) {
                const double xhat = (xv(i, j) - mean) * inv_std;
                n.aux(i, j) = xhat;
                n.value(i, j) = xhat * gv(j, 0) + bv(j, 0);
            }
        }
        return push(std::move(n));
    }

    Var softmax_xent(Var logits, int label) {
        const Matrix& lv = value(logits);
        if (lv.cols() != 1)
            throw ShapeError("softmax_xent: logits must be a column, got " + lv.shape());
        if (label < 0 || label >= lv.rows())
            throw InputError("softmax_xent: label " + std::to_string(label) + " outside " +
                             std::to_string(lv.rows()) + " classes");
        Node n = unary(OpKind::SoftmaxXent, logits);
        n.i0 = label;
        double top = lv(0, 0);
        for (int i = 1; i < lv.rows(); ++i) top = std::max(top, lv(i, 0));
        double denom = 0.0;
        for (int i = 0; i < lv.rows(); ++i) denom += std::exp(lv(i, 0) - top);
        n.aux = Matrix(lv.rows(), 1); // softmax probabilities
        for (int i = 0; i < lv.rows(); ++i) n.aux(i, 0) = std::exp(lv(i, 0) - top) / denom;
        n.value = Matrix(1, 1, -(lv(label, 0) - top - std::log(denom)));
        return push(std::move(n));
    }

    Var sum_all(Var x) {
        const Matrix& xv = value(x);
        Node n = unary(OpKind::SumAll, x);
        double s = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
        n.value = Matrix(1, 1, s);
        return push(std::move(n));
    }

    const Matrix& value(Var v) const { return node(v).value; }

    // Zero for nodes the loss never reached.
    Matrix grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    int size() const { return static_cast<int>(nodes_.size()); }

    void backward(Var loss) {
        const Node& top = node(loss);
        if (top.value.rows() != 1 || top.value.cols() != 1)
            throw InputError("backward: loss must be scalar, got " + top.value.shape());
        for (Node& n : nodes_) n.grad = Matrix();
        nodes_[loss.id].grad = Matrix(1, 1, 1.0);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.grad.empty()) continue; // unreached; contributes nothing
            step_backward(n);
        }
    }

private:
    static constexpr double kLayerNormEps = 1e-5;

    struct Node {
        OpKind op = OpKind::Leaf;
        int a = -1, b = -1, c = -1, d = -1;
        Matrix value;
        Matrix grad;
        Matrix aux;           // op-specific saved matrix (mask, softmax, normalized rows)
        Matrix aux2;          // layer_norm inverse stddev
        std::vector<int> ids; // gather indices
        double s0 = 0.0, s1 = 0.0;
        int i0 = -1;
    };

    Node binary(OpKind op, Var a, Var b) {
        if (op == OpKind::Add || op == OpKind::Sub || op == OpKind::Mul)
            require_same_shape(value(a), value(b), op == OpKind::Add ? "add" : op == OpKind::Sub ? "sub" : "mul");
        Node n;
        n.op = op;
        n.a = a.id;
        n.b = b.id;
        return n;
    }

    Node unary(OpKind op, Var a) {
        Node n;
        n.op = op;
        n.a = a.id;
        return n;
    }

    void require_scalar(Var v, const char* what) const {
        const Matrix& m = value(v);
        if (m.rows() != 1 || m.cols() != 1)
            throw ShapeError(std::string(what) + ": expected 1x1, got " + m.shape());
    }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Node& node(Var v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw InputError("tape: invalid node id " + std::to_string(v.id));
        return nodes_[v.id];
    }

    void acc(int id, Matrix g) {
        if (id < 0) return;
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            n.grad = std::move(g);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
        }
    }

    void step_backward(Node& n) {
        const Matrix& g = n.grad;
        switch (n.op) {
            case OpKind::Leaf:
                break;
            case OpKind::MatMul:
                acc(n.a, ldn::matmul(g, ldn::transpose(nodes_[n.b].value)));
                acc(n.b, ldn::matmul(ldn::transpose(nodes_[n.a].value), g));
                break;
            case OpKind::Add:
                acc(n.a, g);
                acc(n.b, g);
                break;
            case OpKind::Sub:
                acc(n.a, g);
                acc(n.b, scaled(g, -1.0));
                break;
            case OpKind::Mul:
                acc(n.a, hadamard(g, nodes_[n.b].value));
                acc(n.b, hadamard(g, nodes_[n.a].value));
                break;
            case OpKind::ScaleConst:
                acc(n.a, scaled(g, n.s0));
                break;
            case OpKind::AddConst:
                acc(n.a, g);
                break;
            case OpKind::MulConst:
                acc(n.a, hadamard(g, n.aux));
                break;
            case OpKind::MulScalar: {
                const double s = nodes_[n.b].value(0, 0);
                acc(n.a, scaled(g, s));
                double ds = 0.0;
                const Matrix& xv = nodes_[n.a].value;
                for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * xv[i];
                acc(n.b, Matrix(1, 1, ds));
                break;
            }
            case OpKind::DivScalar: {
                const double s = nodes_[n.b].value(0, 0);
                acc(n.a, scaled(g, 1.0 / s));
                double ds = 0.0;
                const Matrix& xv = nodes_[n.a].value;
                for (std::size_t i = 0; i < g.size(); ++i) ds += g[i] * xv[i];
                acc(n.b, Matrix(1, 1, -ds / (s * s)));
                break;
            }
            case OpKind::Cwise: {
                const Unary f = static_cast<Unary>(n.i0);
                const Matrix& xv = nodes_[n.a].value;
                Matrix dx = g;
                for (std::size_t i = 0; i < dx.size(); ++i) {
                    double deriv = 0.0;
                    switch (f) {
                        case Unary::Softplus: deriv = sigmoid(xv[i]); break;
                        case Unary::Sigmoid: deriv = n.value[i] * (1.0 - n.value[i]); break;
                        case Unary::Tanh: deriv = 1.0 - n.value[i] * n.value[i]; break;
                        case Unary::Exp: deriv = n.value[i]; break;
                    }
                    dx[i] *= deriv;
                }
                acc(n.a, std::move(dx));
                break;
            }
            case OpKind::Clamp: {
                const Matrix& xv = nodes_[n.a].value;
                Matrix dx = g;
                for (std::size_t i = 0; i < dx.size(); ++i)
                    if (xv[i] <= n.s0 || xv[i] >= n.s1) dx[i] = 0.0;
                acc(n.a, std::move(dx));
                break;
            }
            case OpKind::Transpose:
                acc(n.a, ldn::transpose(g));
                break;
            case OpKind::ConcatCols: {
                const Matrix& av = nodes_[n.a].value;
                const Matrix& bv = nodes_[n.b].value;
                Matrix da(av.rows(), av.cols());
                Matrix db(bv.rows(), bv.cols());
                for (int i = 0; i < av.rows(); ++i) {
                    for (int j = 0; j < av.cols(); ++j) da(i, j) = g(i, j);
                    for (int j = 0; j < bv.cols(); ++j) db(i, j) = g(i, av.cols() + j);
                }
                acc(n.a, std::move(da));
                acc(n.b, std::move(db));
                break;
            }
            case OpKind::AddRowVec: {
                acc(n.a, g);
                Matrix dv(g.cols(), 1);
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < g.cols(); ++j) dv(j, 0) += g(i, j);
                acc(n.b, std::move(dv));
                break;
            }
            case OpKind::RowScale: {
                const Matrix& xv = nodes_[n.a].value;
                const Matrix& rv = nodes_[n.b].value;
                Matrix dx = g;
                Matrix dr(rv.rows(), 1);
                for (int i = 0; i < xv.rows(); ++i) {
                    double s = 0.0;
                    for (int j = 0; j < xv.cols(); ++j) {
                        s += g(i, j) * xv(i, j);
                        dx(i, j) *= rv(i, 0);
                    }
                    dr(i, 0) = s;
                }
                acc(n.a, std::move(dx));
                acc(n.b, std::move(dr));
                break;
            }
            case OpKind::GatherRows: {
                const Matrix& tv = nodes_[n.a].value;
                Matrix dt(tv.rows(), tv.cols());
                for (int t = 0; t < g.rows(); ++t)
                    for (int j = 0; j < g.cols(); ++j) dt(n.ids[t], j) += g(t, j);
                acc(n.a, std::move(dt));
                break;
            }
            case OpKind::PairGate: {
                const Matrix& pv = nodes_[n.a].value;
                const Matrix& qv = nodes_[n.b].value;
                const Matrix& wv = nodes_[n.c].value;
                const int t_len = pv.rows(), hidden = pv.cols();
                Matrix dp(t_len, hidden), dq(t_len, hidden), dw(hidden, 1);
                double db = 0.0;
                for (int t = 0; t < t_len; ++t) {
                    for (int s = 0; s < t_len; ++s) {
                        const double y = n.value(t, s);
                        const double da = g(t, s) * y * (1.0 - y);
                        if (da == 0.0) continue;
                        db += da;
                        for (int i = 0; i < hidden; ++i) {
                            const double u = std::tanh(pv(t, i) + qv(s, i));
                            dw(i, 0) += da * u;
                            const double through = da * wv(i, 0) * (1.0 - u * u);
                            dp(t, i) += through;
                            dq(s, i) += through;
                        }
                    }
                }
                if (pair_gate_w_grad_scale != 1.0)
                    for (int i = 0; i < hidden; ++i) dw(i, 0) *= pair_gate_w_grad_scale;
                acc(n.a, std::move(dp));
                acc(n.b, std::move(dq));
                acc(n.c, std::move(dw));
                acc(n.d, Matrix(1, 1, db));
                break;
            }
            case OpKind::GaussDecay: {
                const double sigma = std::exp(nodes_[n.a].value(0, 0));
                const double inv_sq = 1.0 / (sigma * sigma);
                double dls = 0.0;
                const int t_len = n.i0;
                for (int t = 0; t < t_len; ++t)
                    for (int s = 0; s < t_len; ++s) {
                        const double delta = static_cast<double>(t - s);
                        dls += g(t, s) * n.value(t, s) * delta * delta * inv_sq;
                    }
                acc(n.a, Matrix(1, 1, dls));
                break;
            }
            case OpKind::MaxFloor: {
                if (n.i0 >= 0) {
                    const Matrix& xv = nodes_[n.a].value;
                    Matrix dx(xv.rows(), xv.cols());
                    dx[static_cast<std::size_t>(n.i0)] = g(0, 0);
                    acc(n.a, std::move(dx));
                }
                break;
            }
            case OpKind::RowSums: {
                const Matrix& xv = nodes_[n.a].value;
                Matrix dx(xv.rows(), xv.cols());
                for (int i = 0; i < xv.rows(); ++i)
                    for (int j = 0; j < xv.cols(); ++j) dx(i, j) = g(i, 0);
                acc(n.a, std::move(dx));
                break;
            }
            case OpKind::MeanRows: {
                const Matrix& xv = nodes_[n.a].value;
                Matrix dx(xv.rows(), xv.cols());
                const double inv = 1.0 / xv.rows();
                for (int i = 0; i < xv.rows(); ++i)
                    for (int j = 0; j < xv.cols(); ++j) dx(i, j) = g(j, 0) * inv;
                acc(n.a, std::move(dx));
                break;
            }
            case OpKind::LayerNorm: {
                const Matrix& gv = nodes_[n.b].value;
                const int rows = n.value.rows(), d = n.value.cols();
                Matrix dx(rows, d), dgamma(d, 1), dbeta(d, 1);
                for (int i = 0; i < rows; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxhat = g(i, j) * gv(j, 0);
                        dgamma(j, 0) += g(i, j) * n.aux(i, j);
                        dbeta(j, 0) += g(i, j);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * n.aux(i, j);
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    const double inv_std = n.aux2(i, 0);
                    for (int j = 0; j < d; ++j) {
                        const double dxhat = g(i, j) * gv(j, 0);
                        dx(i, j) = inv_std * (dxhat - mean_dxhat - n.aux(i, j) * mean_dxhat_xhat);
                    }
                }
                acc(n.a, std::move(dx));
                acc(n.b, std::move(dgamma));
                acc(n.c, std::move(dbeta));
                break;
            }
            case OpKind::SoftmaxXent: {
                Matrix dl = n.aux; // softmax probabilities
                dl(n.i0, 0) -= 1.0;
                acc(n.a, scaled(dl, g(0, 0)));
                break;
            }
            case OpKind::SumAll: {
                const Matrix& xv = nodes_[n.a].value;
                acc(n.a, Matrix(xv.rows(), xv.cols(), g(0, 0)));
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

} // namespace ldn
