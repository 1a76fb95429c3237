#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pnlab/tensor.hpp"

namespace pnlab {

// Reverse-mode autodiff over a define-by-run tape. One tape owns one
// forward/backward episode; it is single-threaded and consumed by backward.
//
// Supported ops and their shape rules (no broadcasting anywhere):
//   matmul        [m,k] x [k,n] -> [m,n]
//   transpose     [m,n] -> [n,m]
//   add, mul      same shape, elementwise
//   scale         any shape, multiply by a constant scalar
//   expand_rows   [n] -> [m,n], m copies of the row
//   row_gather    table [V,d], k row ids -> [k,d]   (embedding gather)
//   replace_row   ([r,c], [c], row index) -> [r,c] with one row substituted
//   replace_entry ([..], [1], flat index) -> same shape, one entry substituted
//   slice         [m,n] rectangular [r0,r1)x[c0,c1); 1-D [i0,i1)
//   concat_cols   [r,c1],[r,c2],... -> [r, sum ci]
//   reshape       any -> any with equal element count
//   softmax_rows  [m,n] per row (or a whole 1-D vector)
//   layer_norm    (x [n,d], gain [d], bias [d]) -> [n,d]
//   gelu, log     elementwise
//   sum           any -> [1]
//   cross_entropy (probs [n,V], n targets) -> [1], mean of -log probs[r, t_r]
//
// Non-finite values are rejected at every op boundary.

enum class OpKind : uint8_t {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    ExpandRows,
    RowGather,
    ReplaceRow,
    ReplaceEntry,
    Slice,
    ConcatCols,
    Reshape,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Log,
    Sum,
    CrossEntropy,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::ExpandRows: return "expand_rows";
        case OpKind::RowGather: return "row_gather";
        case OpKind::ReplaceRow: return "replace_row";
        case OpKind::ReplaceEntry: return "replace_entry";
        case OpKind::Slice: return "slice";
        case OpKind::ConcatCols: return "concat_cols";
        case OpKind::Reshape: return "reshape";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Gelu: return "gelu";
        case OpKind::Log: return "log";
        case OpKind::Sum: return "sum";
        case OpKind::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

class Tape;

// Traced tensor handle: a node id on some tape.
class Var {
public:
    Var() = default;
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr && id_ >= 0; }

    const Shape& shape() const;
    const std::vector<double>& value() const;
    Tensor tensor() const;
    double item() const;

private:
    friend class Tape;
    Var(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Node id of a tensor designated as a differentiation target.
struct LeafHandle {
    int id = -1;
};

class Gradients {
public:
    const Tensor& at(const Var& leaf) const { return at(LeafHandle{leaf.id()}); }
    const Tensor& at(LeafHandle h) const {
        auto it = grads_.find(h.id);
        if (it == grads_.end()) throw std::invalid_argument("no gradient recorded for node " + std::to_string(h.id));
        return it->second;
    }
    bool contains(const Var& leaf) const { return grads_.count(leaf.id()) > 0; }
    size_t size() const { return grads_.size(); }

private:
    friend class Tape;
    std::unordered_map<int, Tensor> grads_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    Var leaf(const Tensor& t) {
        require_finite(t, "leaf");
        return push(OpKind::Leaf, t.shape(), std::vector<double>(t.data()), {}, {}, {}, {});
    }

    Var constant(const Tensor& t) {
        require_finite(t, "constant");
        return push(OpKind::Constant, t.shape(), std::vector<double>(t.data()), {}, {}, {}, {});
    }

    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Gradients of a scalar root with respect to every leaf on the tape.
    // Consumes the tape: a second backward without re-recording is an error.
    Gradients backward(const Var& root) {
        if (root.tape() != this) throw std::invalid_argument("backward: root is not on this tape");
        if (consumed_) throw std::runtime_error("backward: tape already consumed, re-record the graph");
        if (numel(nodes_[static_cast<size_t>(root.id())].shape) != 1)
            throw std::invalid_argument("backward: root must be scalar, got " +
                                        shape_str(nodes_[static_cast<size_t>(root.id())].shape));
        consumed_ = true;

        std::vector<std::vector<double>> grad(nodes_.size());
        grad[static_cast<size_t>(root.id())] = {1.0};

        for (int i = root.id(); i >= 0; --i) {
            auto& g = grad[static_cast<size_t>(i)];
            if (g.empty()) continue;
            backward_step(static_cast<size_t>(i), g, grad);
            if (nodes_[static_cast<size_t>(i)].kind != OpKind::Leaf && i != root.id())
                g.clear();  // non-leaf gradients discarded
        }

        Gradients out;
        for (int id : leaves_) {
            auto& g = grad[static_cast<size_t>(id)];
            const Shape& s = nodes_[static_cast<size_t>(id)].shape;
            if (g.empty())
                out.grads_.emplace(id, Tensor(s));
            else
                out.grads_.emplace(id, Tensor(s, std::move(g)));
        }
        return out;
    }

    // ---- op recording -------------------------------------------------

    Var matmul(const Var& a, const Var& b) {
        check_same_tape({a, b}, "matmul");
        const Shape &sa = shape_of(a), &sb = shape_of(b);
        if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
            throw std::invalid_argument(std::string("matmul: incompatible shapes ") + shape_str(sa) + " x " +
                                        shape_str(sb));
        const size_t m = sa[0], k = sa[1], n = sb[1];
        std::vector<double> out(m * n, 0.0);
        const auto &A = value_of(a), &B = value_of(b);
        for (size_t i = 0; i < m; ++i) {
            const double* arow = A.data() + i * k;
            double* crow = out.data() + i * n;
            for (size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = B.data() + p * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return push(OpKind::MatMul, {m, n}, std::move(out), {a.id(), b.id()}, {}, {}, {});
    }

    Var transpose(const Var& a) {
        check_same_tape({a}, "transpose");
        const Shape& s = shape_of(a);
        if (s.size() != 2) throw std::invalid_argument("transpose: need 2-D, got " + shape_str(s));
        const size_t m = s[0], n = s[1];
        std::vector<double> out(m * n);
        const auto& A = value_of(a);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
        return push(OpKind::Transpose, {n, m}, std::move(out), {a.id()}, {}, {}, {});
    }

    Var add(const Var& a, const Var& b) { return binary_elementwise(OpKind::Add, a, b); }
    Var mul(const Var& a, const Var& b) { return binary_elementwise(OpKind::Mul, a, b); }

    Var scale(const Var& a, double c) {
        check_same_tape({a}, "scale");
        if (!std::isfinite(c)) throw std::domain_error("scale: non-finite factor");
        std::vector<double> out = value_of(a);
        for (double& v : out) v *= c;
        return push(OpKind::Scale, shape_of(a), std::move(out), {a.id()}, {}, {c}, {});
    }

    Var expand_rows(const Var& v, size_t m) {
        check_same_tape({v}, "expand_rows");
        const Shape& s = shape_of(v);
        if (s.size() != 1) throw std::invalid_argument("expand_rows: need 1-D, got " + shape_str(s));
        if (m == 0) throw std::invalid_argument("expand_rows: zero rows");
        const size_t n = s[0];
        std::vector<double> out(m * n);
        const auto& V = value_of(v);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out[i * n + j] = V[j];
        return push(OpKind::ExpandRows, {m, n}, std::move(out), {v.id()}, {m}, {}, {});
    }

    Var row_gather(const Var& table, const std::vector<size_t>& rows) {
        check_same_tape({table}, "row_gather");
        const Shape& s = shape_of(table);
        if (s.size() != 2) throw std::invalid_argument("row_gather: table must be 2-D, got " + shape_str(s));
        if (rows.empty()) throw std::invalid_argument("row_gather: empty row list");
        const size_t d = s[1];
        std::vector<double> out(rows.size() * d);
        const auto& T = value_of(table);
        for (size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= s[0])
                throw std::invalid_argument("row_gather: row " + std::to_string(rows[i]) + " out of range for " +
                                            shape_str(s));
            std::copy(T.begin() + static_cast<ptrdiff_t>(rows[i] * d),
                      T.begin() + static_cast<ptrdiff_t>((rows[i] + 1) * d),
                      out.begin() + static_cast<ptrdiff_t>(i * d));
        }
        return push(OpKind::RowGather, {rows.size(), d}, std::move(out), {table.id()}, rows, {}, {});
    }

    Var replace_row(const Var& m, const Var& row, size_t r) {
        check_same_tape({m, row}, "replace_row");
        const Shape &sm = shape_of(m), &sr = shape_of(row);
        if (sm.size() != 2 || sr.size() != 1 || sr[0] != sm[1])
            throw std::invalid_argument(std::string("replace_row: incompatible shapes ") + shape_str(sm) + ", " +
                                        shape_str(sr));
        if (r >= sm[0]) throw std::invalid_argument("replace_row: row index out of range");
        std::vector<double> out = value_of(m);
        const auto& R = value_of(row);
        std::copy(R.begin(), R.end(), out.begin() + static_cast<ptrdiff_t>(r * sm[1]));
        return push(OpKind::ReplaceRow, sm, std::move(out), {m.id(), row.id()}, {r}, {}, {});
    }

    Var replace_entry(const Var& m, const Var& scalar, size_t flat_index) {
        check_same_tape({m, scalar}, "replace_entry");
        const Shape& sm = shape_of(m);
        if (numel(shape_of(scalar)) != 1) throw std::invalid_argument("replace_entry: value must be scalar");
        if (flat_index >= numel(sm)) throw std::invalid_argument("replace_entry: index out of range");
        std::vector<double> out = value_of(m);
        out[flat_index] = value_of(scalar)[0];
        return push(OpKind::ReplaceEntry, sm, std::move(out), {m.id(), scalar.id()}, {flat_index}, {}, {});
    }

    Var slice(const Var& m, size_t r0, size_t r1, size_t c0, size_t c1) {
        check_same_tape({m}, "slice");
        const Shape& s = shape_of(m);
        if (s.size() != 2) throw std::invalid_argument("slice: need 2-D, got " + shape_str(s));
        if (r0 >= r1 || r1 > s[0] || c0 >= c1 || c1 > s[1])
            throw std::invalid_argument("slice: range [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" +
                                        std::to_string(c0) + "," + std::to_string(c1) + ") out of " + shape_str(s));
        const size_t rows = r1 - r0, cols = c1 - c0;
        std::vector<double> out(rows * cols);
        const auto& M = value_of(m);
        for (size_t i = 0; i < rows; ++i)
            std::copy(M.begin() + static_cast<ptrdiff_t>((r0 + i) * s[1] + c0),
                      M.begin() + static_cast<ptrdiff_t>((r0 + i) * s[1] + c1),
                      out.begin() + static_cast<ptrdiff_t>(i * cols));
        return push(OpKind::Slice, {rows, cols}, std::move(out), {m.id()}, {r0, r1, c0, c1}, {}, {});
    }

    Var slice1d(const Var& v, size_t i0, size_t i1) {
        check_same_tape({v}, "slice");
        const Shape& s = shape_of(v);
        if (s.size() != 1) throw std::invalid_argument("slice1d: need 1-D, got " + shape_str(s));
        if (i0 >= i1 || i1 > s[0]) throw std::invalid_argument("slice1d: range out of " + shape_str(s));
        std::vector<double> out(value_of(v).begin() + static_cast<ptrdiff_t>(i0),
                                value_of(v).begin() + static_cast<ptrdiff_t>(i1));
        // 1-D slice is the 2-D op on a [1,n] view
        return push(OpKind::Slice, {i1 - i0}, std::move(out), {v.id()}, {0, 1, i0, i1}, {}, {});
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        check_same_tape(parts, "concat_cols");
        const size_t rows = shape_of(parts[0])[0];
        size_t total = 0;
        std::vector<int> ids;
        std::vector<size_t> widths;
        for (const Var& p : parts) {
            const Shape& s = shape_of(p);
            if (s.size() != 2 || s[0] != rows)
                throw std::invalid_argument("concat_cols: incompatible part shape " + shape_str(s));
            total += s[1];
            ids.push_back(p.id());
            widths.push_back(s[1]);
        }
        std::vector<double> out(rows * total);
        size_t off = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            const auto& P = value_of(parts[p]);
            for (size_t i = 0; i < rows; ++i)
                std::copy(P.begin() + static_cast<ptrdiff_t>(i * widths[p]),
                          P.begin() + static_cast<ptrdiff_t>((i + 1) * widths[p]),
                          out.begin() + static_cast<ptrdiff_t>(i * total + off));
            off += widths[p];
        }
        return push(OpKind::ConcatCols, {rows, total}, std::move(out), std::move(ids), widths, {}, {});
    }

    Var reshape(const Var& a, Shape shape) {
        check_same_tape({a}, "reshape");
        if (numel(shape) != numel(shape_of(a)))
            throw std::invalid_argument(std::string("reshape: element count mismatch ") + shape_str(shape_of(a)) +
                                        " -> " + shape_str(shape));
        return push(OpKind::Reshape, std::move(shape), std::vector<double>(value_of(a)), {a.id()}, {}, {}, {});
    }

    Var softmax_rows(const Var& a) {
        check_same_tape({a}, "softmax_rows");
        const Shape& s = shape_of(a);
        if (s.size() != 1 && s.size() != 2) throw std::invalid_argument("softmax_rows: need 1-D or 2-D");
        const size_t rows = s.size() == 2 ? s[0] : 1;
        const size_t n = s.size() == 2 ? s[1] : s[0];
        std::vector<double> out(rows * n);
        const auto& A = value_of(a);
        for (size_t i = 0; i < rows; ++i) {
            const double* x = A.data() + i * n;
            double* y = out.data() + i * n;
            double mx = x[0];
            for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            double z = 0.0;
            for (size_t j = 0; j < n; ++j) {
                y[j] = std::exp(x[j] - mx);
                z += y[j];
            }
            for (size_t j = 0; j < n; ++j) y[j] /= z;
        }
        return push(OpKind::SoftmaxRows, s, std::move(out), {a.id()}, {}, {}, {});
    }

    Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
        check_same_tape({x, gain, bias}, "layer_norm");
        const Shape& s = shape_of(x);
        if (s.size() != 2) throw std::invalid_argument("layer_norm: x must be 2-D, got " + shape_str(s));
        const size_t n = s[0], d = s[1];
        if (shape_of(gain) != Shape{d} || shape_of(bias) != Shape{d})
            throw std::invalid_argument("layer_norm: gain/bias must be [d]=" + std::to_string(d));
        std::vector<double> out(n * d);
        std::vector<double> saved(n * d + n);  // xhat rows, then inv_std per row
        const auto &X = value_of(x), &G = value_of(gain), &B = value_of(bias);
        for (size_t i = 0; i < n; ++i) {
            const double* xr = X.data() + i * d;
            double mu = 0.0;
            for (size_t j = 0; j < d; ++j) mu += xr[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            saved[n * d + i] = inv;
            for (size_t j = 0; j < d; ++j) {
                const double xh = (xr[j] - mu) * inv;
                saved[i * d + j] = xh;
                out[i * d + j] = xh * G[j] + B[j];
            }
        }
        return push(OpKind::LayerNorm, s, std::move(out), {x.id(), gain.id(), bias.id()}, {}, {eps},
                    std::move(saved));
    }

    Var gelu(const Var& a) {
        check_same_tape({a}, "gelu");
        std::vector<double> out = value_of(a);
        for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
        return push(OpKind::Gelu, shape_of(a), std::move(out), {a.id()}, {}, {}, {});
    }

    Var log(const Var& a) {
        check_same_tape({a}, "log");
        std::vector<double> out = value_of(a);
        for (double& v : out) v = std::log(v);
        return push(OpKind::Log, shape_of(a), std::move(out), {a.id()}, {}, {}, {});
    }

    Var sum(const Var& a) {
        check_same_tape({a}, "sum");
        double s = 0.0;
        for (double v : value_of(a)) s += v;
        return push(OpKind::Sum, {1}, {s}, {a.id()}, {}, {}, {});
    }

    // Mean over rows of -log probs[r, targets[r]]. probs are probabilities
    // (compose with softmax_rows for logits-space cross-entropy).
    Var cross_entropy(const Var& probs, const std::vector<size_t>& targets) {
        check_same_tape({probs}, "cross_entropy");
        const Shape& s = shape_of(probs);
        if (s.size() != 2) throw std::invalid_argument("cross_entropy: probs must be 2-D, got " + shape_str(s));
        if (targets.size() != s[0])
            throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                        std::to_string(s[0]) + " rows");
        const auto& P = value_of(probs);
        double acc = 0.0;
        for (size_t i = 0; i < targets.size(); ++i) {
            if (targets[i] >= s[1]) throw std::invalid_argument("cross_entropy: target id out of range");
            acc += -std::log(P[i * s[1] + targets[i]]);
        }
        acc /= static_cast<double>(targets.size());
        return push(OpKind::CrossEntropy, {1}, {acc}, {probs.id()}, targets, {}, {});
    }

    // Replaces one entry of t with an independent leaf holding `value`, so
    // gradients with respect to that intervention point are well defined.
    // The upstream graph is unchanged; everything downstream of the result
    // depends on the leaf. Negative zero is normalized at the boundary.
    std::pair<Var, Var> clamp_leaf(const Var& t, size_t flat_index, double value) {
        Var lf = leaf(Tensor::scalar(value + 0.0));
        Var out = replace_entry(t, lf, flat_index);
        return {out, lf};
    }

    // Whole-row variant: the intervention leaf carries an entire activation
    // row, so one backward yields gradients for every neuron of the row.
    std::pair<Var, Var> clamp_leaf_row(const Var& m, size_t row, const std::vector<double>& values) {
        const Shape& s = shape_of(m);
        if (s.size() != 2) throw std::invalid_argument("clamp_leaf_row: need 2-D");
        if (values.size() != s[1]) throw std::invalid_argument("clamp_leaf_row: row width mismatch");
        std::vector<double> v(values);
        for (double& x : v) x += 0.0;
        Var lf = leaf(Tensor({s[1]}, std::move(v)));
        Var out = replace_row(m, lf, row);
        return {out, lf};
    }

    // Scalar picked out of a 2-D tensor, shape [1].
    Var pick(const Var& m, size_t r, size_t c) { return reshape(slice(m, r, r + 1, c, c + 1), {1}); }

    const Shape& shape_of(const Var& v) const { return nodes_[static_cast<size_t>(v.id())].shape; }
    const std::vector<double>& value_of(const Var& v) const { return nodes_[static_cast<size_t>(v.id())].value; }

private:
    struct Node {
        OpKind kind;
        Shape shape;
        std::vector<double> value;
        std::vector<int> inputs;
        std::vector<size_t> iargs;
        std::vector<double> dargs;
        std::vector<double> saved;
    };

    Var binary_elementwise(OpKind kind, const Var& a, const Var& b) {
        check_same_tape({a, b}, op_name(kind));
        const Shape &sa = shape_of(a), &sb = shape_of(b);
        if (sa != sb)
            throw std::invalid_argument(std::string(op_name(kind)) + ": shape mismatch " + shape_str(sa) + " vs " +
                                        shape_str(sb));
        std::vector<double> out(numel(sa));
        const auto &A = value_of(a), &B = value_of(b);
        if (kind == OpKind::Add)
            for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
        else
            for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
        return push(kind, sa, std::move(out), {a.id(), b.id()}, {}, {}, {});
    }

    void check_same_tape(const std::vector<Var>& vars, const std::string& op) const {
        for (const Var& v : vars) {
            if (v.tape() != this) throw std::invalid_argument(op + ": input not recorded on this tape");
            if (v.id() < 0 || static_cast<size_t>(v.id()) >= nodes_.size())
                throw std::invalid_argument(op + ": invalid node id");
        }
    }

    Var push(OpKind kind, Shape shape, std::vector<double> value, std::vector<int> inputs, std::vector<size_t> iargs,
             std::vector<double> dargs, std::vector<double> saved) {
        for (double v : value)
            if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite value in output of ") + op_name(kind));
        if (consumed_) throw std::runtime_error("tape already consumed, re-record the graph");
        nodes_.push_back(Node{kind, std::move(shape), std::move(value), std::move(inputs), std::move(iargs),
                              std::move(dargs), std::move(saved)});
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (kind == OpKind::Leaf) leaves_.push_back(id);
        return Var(this, id);
    }

    static void axpy(std::vector<double>& dst, const std::vector<double>& src, const Shape& shape) {
        if (dst.empty()) dst.assign(numel(shape), 0.0);
        for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }

    std::vector<double>& grad_buf(std::vector<std::vector<double>>& grad, int id) {
        auto& g = grad[static_cast<size_t>(id)];
        if (g.empty()) g.assign(numel(nodes_[static_cast<size_t>(id)].shape), 0.0);
        return g;
    }

    void backward_step(size_t i, const std::vector<double>& gy, std::vector<std::vector<double>>& grad) {
        const Node& nd = nodes_[i];
        switch (nd.kind) {
            case OpKind::Leaf:
            case OpKind::Constant:
                return;
            case OpKind::MatMul: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                const Node& nb = nodes_[static_cast<size_t>(nd.inputs[1])];
                const size_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                auto& gb = grad_buf(grad, nd.inputs[1]);
                // dA = dC * B^T
                for (size_t r = 0; r < m; ++r) {
                    const double* gyr = gy.data() + r * n;
                    double* gar = ga.data() + r * k;
                    for (size_t p = 0; p < k; ++p) {
                        const double* brow = nb.value.data() + p * n;
                        double acc = 0.0;
                        for (size_t j = 0; j < n; ++j) acc += gyr[j] * brow[j];
                        gar[p] += acc;
                    }
                }
                // dB = A^T * dC
                for (size_t r = 0; r < m; ++r) {
                    const double* arow = na.value.data() + r * k;
                    const double* gyr = gy.data() + r * n;
                    for (size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* gbr = gb.data() + p * n;
                        for (size_t j = 0; j < n; ++j) gbr[j] += av * gyr[j];
                    }
                }
                return;
            }
            case OpKind::Transpose: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                const size_t m = na.shape[0], n = na.shape[1];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                for (size_t j = 0; j < n; ++j)
                    for (size_t r = 0; r < m; ++r) ga[r * n + j] += gy[j * m + r];
                return;
            }
            case OpKind::Add: {
                axpy(grad[static_cast<size_t>(nd.inputs[0])], gy, nd.shape);
                axpy(grad[static_cast<size_t>(nd.inputs[1])], gy, nd.shape);
                return;
            }
            case OpKind::Mul: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                const Node& nb = nodes_[static_cast<size_t>(nd.inputs[1])];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                auto& gb = grad_buf(grad, nd.inputs[1]);
                for (size_t j = 0; j < gy.size(); ++j) {
                    ga[j] += gy[j] * nb.value[j];
                    gb[j] += gy[j] * na.value[j];
                }
                return;
            }
            case OpKind::Scale: {
                auto& ga = grad_buf(grad, nd.inputs[0]);
                const double c = nd.dargs[0];
                for (size_t j = 0; j < gy.size(); ++j) ga[j] += c * gy[j];
                return;
            }
            case OpKind::ExpandRows: {
                const size_t m = nd.iargs[0], n = nd.shape[1];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                for (size_t r = 0; r < m; ++r)
                    for (size_t j = 0; j < n; ++j) ga[j] += gy[r * n + j];
                return;
            }
            case OpKind::RowGather: {
                const size_t d = nd.shape[1];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                for (size_t r = 0; r < nd.iargs.size(); ++r) {
                    double* dst = ga.data() + nd.iargs[r] * d;
                    const double* src = gy.data() + r * d;
                    for (size_t j = 0; j < d; ++j) dst[j] += src[j];
                }
                return;
            }
            case OpKind::ReplaceRow: {
                const size_t cols = nd.shape[1], r = nd.iargs[0];
                auto& gm = grad_buf(grad, nd.inputs[0]);
                auto& gr = grad_buf(grad, nd.inputs[1]);
                for (size_t idx = 0; idx < gy.size(); ++idx) {
                    if (idx / cols == r)
                        gr[idx % cols] += gy[idx];
                    else
                        gm[idx] += gy[idx];
                }
                return;
            }
            case OpKind::ReplaceEntry: {
                const size_t at = nd.iargs[0];
                auto& gm = grad_buf(grad, nd.inputs[0]);
                auto& gs = grad_buf(grad, nd.inputs[1]);
                for (size_t idx = 0; idx < gy.size(); ++idx) {
                    if (idx == at)
                        gs[0] += gy[idx];
                    else
                        gm[idx] += gy[idx];
                }
                return;
            }
            case OpKind::Slice: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                const size_t r0 = nd.iargs[0], r1 = nd.iargs[1], c0 = nd.iargs[2], c1 = nd.iargs[3];
                const size_t stride = na.shape.size() == 2 ? na.shape[1] : na.shape[0];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                const size_t cols = c1 - c0;
                for (size_t r = r0; r < r1; ++r)
                    for (size_t c = 0; c < cols; ++c) ga[r * stride + c0 + c] += gy[(r - r0) * cols + c];
                return;
            }
            case OpKind::ConcatCols: {
                const size_t rows = nd.shape[0], total = nd.shape[1];
                size_t off = 0;
                for (size_t p = 0; p < nd.inputs.size(); ++p) {
                    const size_t w = nd.iargs[p];
                    auto& gp = grad_buf(grad, nd.inputs[p]);
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t c = 0; c < w; ++c) gp[r * w + c] += gy[r * total + off + c];
                    off += w;
                }
                return;
            }
            case OpKind::Reshape: {
                axpy(grad[static_cast<size_t>(nd.inputs[0])], gy, nodes_[static_cast<size_t>(nd.inputs[0])].shape);
                return;
            }
            case OpKind::SoftmaxRows: {
                const size_t rows = nd.shape.size() == 2 ? nd.shape[0] : 1;
                const size_t n = nd.shape.size() == 2 ? nd.shape[1] : nd.shape[0];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                for (size_t r = 0; r < rows; ++r) {
                    const double* y = nd.value.data() + r * n;
                    const double* gyr = gy.data() + r * n;
                    double dot = 0.0;
                    for (size_t j = 0; j < n; ++j) dot += gyr[j] * y[j];
                    double* gar = ga.data() + r * n;
                    for (size_t j = 0; j < n; ++j) gar[j] += (gyr[j] - dot) * y[j];
                }
                return;
            }
            case OpKind::LayerNorm: {
                const Node& nx = nodes_[static_cast<size_t>(nd.inputs[0])];
                const Node& ng = nodes_[static_cast<size_t>(nd.inputs[1])];
                const size_t n = nx.shape[0], d = nx.shape[1];
                auto& gx = grad_buf(grad, nd.inputs[0]);
                auto& gg = grad_buf(grad, nd.inputs[1]);
                auto& gb = grad_buf(grad, nd.inputs[2]);
                const double* xhat = nd.saved.data();
                const double* inv = nd.saved.data() + n * d;
                for (size_t i = 0; i < n; ++i) {
                    const double* gyr = gy.data() + i * d;
                    const double* xh = xhat + i * d;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        const double dxh = gyr[j] * ng.value[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    double* gxr = gx.data() + i * d;
                    for (size_t j = 0; j < d; ++j) {
                        const double dxh = gyr[j] * ng.value[j];
                        gxr[j] += inv[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        gg[j] += gyr[j] * xh[j];
                        gb[j] += gyr[j];
                    }
                }
                return;
            }
            case OpKind::Gelu: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                constexpr double inv_sqrt_2pi = 0.3989422804014326779;
                for (size_t j = 0; j < gy.size(); ++j) {
                    const double x = na.value[j];
                    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    ga[j] += gy[j] * (cdf + x * pdf);
                }
                return;
            }
            case OpKind::Log: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                for (size_t j = 0; j < gy.size(); ++j) ga[j] += gy[j] / na.value[j];
                return;
            }
            case OpKind::Sum: {
                const Node& na = nodes_[static_cast<size_t>(nd.inputs[0])];
                auto& ga = grad_buf(grad, nd.inputs[0]);
                const double g = gy[0];
                for (size_t j = 0; j < numel(na.shape); ++j) ga[j] += g;
                return;
            }
            case OpKind::CrossEntropy: {
                const Node& np = nodes_[static_cast<size_t>(nd.inputs[0])];
                const size_t n = np.shape[0], vdim = np.shape[1];
                auto& gp = grad_buf(grad, nd.inputs[0]);
                const double g = gy[0] / static_cast<double>(n);
                for (size_t r = 0; r < n; ++r) {
                    const size_t t = nd.iargs[r];
                    gp[r * vdim + t] += -g / np.value[r * vdim + t];
                }
                return;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    bool consumed_ = false;
};

inline const Shape& Var::shape() const { return tape_->shape_of(*this); }
inline const std::vector<double>& Var::value() const { return tape_->value_of(*this); }
inline Tensor Var::tensor() const { return Tensor(shape(), value()); }
inline double Var::item() const {
    if (numel(shape()) != 1) throw std::invalid_argument("item() on non-scalar var");
    return value()[0];
}

}  // namespace pnlab
