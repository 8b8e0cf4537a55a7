#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "metfa/errors.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

enum class OpKind {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    relu,
    exp,
    log,
    square,
    sum,
    mean,
    max_reduce,
    min_reduce,
    softmax_rows,
    log_softmax_rows,
    l2_norm_rows,
    concat_rows,
    gather_rows,
    pairwise_sqdist,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::relu: return "relu";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::square: return "square";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::max_reduce: return "max-reduce";
        case OpKind::min_reduce: return "min-reduce";
        case OpKind::softmax_rows: return "softmax-rows";
        case OpKind::log_softmax_rows: return "log-softmax-rows";
        case OpKind::l2_norm_rows: return "l2-norm-rows";
        case OpKind::concat_rows: return "concat-rows";
        case OpKind::gather_rows: return "gather-rows";
        case OpKind::pairwise_sqdist: return "pairwise-sqdist";
    }
    return "?";
}

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const;
    bool requires_grad() const;
    bool valid() const { return tape != nullptr; }
};

// Result of one backward pass: a gradient per node, zeros for nodes the loss
// does not reach.
class Gradients {
public:
    bool has(Var v) const {
        return v.id < by_node_.size() && by_node_[v.id].has_value();
    }
    Tensor of(Var v) const;

private:
    friend class Tape;
    std::vector<std::optional<Tensor>> by_node_;
};

namespace detail {

enum class Broadcast { none, bias_row, col_scalar };

struct Node {
    OpKind op = OpKind::leaf;
    std::array<std::size_t, 2> in{0, 0};
    std::size_t n_in = 0;
    Tensor value;
    bool requires_grad = false;
    double attr = 0.0;                 // scale factor or norm clamp
    bool trans_b = false;              // matmul second-operand transpose
    Broadcast bcast = Broadcast::none; // add/sub/mul second-operand expansion
    std::vector<std::size_t> indices;  // gather rows or reduce arg positions
};

// C = op(A) op(B) with optional transposes, plain triple loop.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const std::size_t ar = trans_a ? a.cols() : a.rows();
    const std::size_t ac = trans_a ? a.rows() : a.cols();
    const std::size_t br = trans_b ? b.cols() : b.rows();
    const std::size_t bc = trans_b ? b.rows() : b.cols();
    if (ac != br) {
        throw ShapeError(std::string("matmul inner dims differ: ") + shape_str(a.shape()) +
                         (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                         (trans_b ? "^T" : ""));
    }
    Tensor out = Tensor::zeros({ar, bc});
    for (std::size_t i = 0; i < ar; ++i) {
        for (std::size_t k = 0; k < ac; ++k) {
            const double av = trans_a ? a.at(k, i) : a.at(i, k);
            for (std::size_t j = 0; j < bc; ++j) {
                const double bv = trans_b ? b.at(j, k) : b.at(k, j);
                out.at(i, j) += av * bv;
            }
        }
    }
    return out;
}

} // namespace detail

// Reverse-mode record of one forward computation. Nodes are appended in
// execution order, so ids are already topologically sorted. Single-threaded;
// independent tapes may run concurrently.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false) {
        detail::Node n;
        n.op = OpKind::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    int numeric_warnings() const { return numeric_warnings_; }

    const detail::Node& node(std::size_t id) const { return nodes_[id]; }

    Gradients backward(Var loss) const;

    // Exposed for the op constructors below; not meant for direct use.
    Var push(detail::Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }
    void note_numeric_warning() { numeric_warnings_ += 1; }

private:
    std::deque<detail::Node> nodes_;
    int numeric_warnings_ = 0;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }
inline const Shape& Var::shape() const { return tape->node(id).value.shape(); }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

inline Tensor Gradients::of(Var v) const {
    if (has(v)) return *by_node_[v.id];
    return Tensor::zeros(v.shape());
}

namespace detail {

inline void check_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw Error("operands live on different tapes");
}

inline Broadcast classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::none;
    if (a.rank() == 2 && b.rank() == 2) {
        if (b.shape()[0] == 1 && b.shape()[1] == a.cols()) return Broadcast::bias_row;
        if (b.shape()[1] == 1 && b.shape()[0] == a.rows()) return Broadcast::col_scalar;
    }
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
}

inline double broadcast_pick(const Tensor& b, Broadcast mode, std::size_t r, std::size_t c) {
    switch (mode) {
        case Broadcast::none: return b.at(r, c);
        case Broadcast::bias_row: return b.at(0, c);
        case Broadcast::col_scalar: return b.at(r, 0);
    }
    return 0.0;
}

// Sums an (n x d) gradient back down to the broadcast operand's shape.
inline Tensor reduce_to_broadcast(const Tensor& g, const Tensor& b_like, Broadcast mode) {
    Tensor out = Tensor::zeros(b_like.shape());
    const std::size_t n = g.rows(), d = g.cols();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            if (mode == Broadcast::bias_row) {
                out.at(0, c) += g.at(r, c);
            } else {
                out.at(r, 0) += g.at(r, c);
            }
        }
    }
    return out;
}

} // namespace detail

inline Var matmul(Var a, Var b, bool trans_b = false) {
    detail::check_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2) {
        throw ShapeError("matmul expects rank-2 tensors");
    }
    detail::Node n;
    n.op = OpKind::matmul;
    n.in = {a.id, b.id};
    n.n_in = 2;
    n.trans_b = trans_b;
    n.value = detail::matmul_raw(av, bv, false, trans_b);
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return a.tape->push(std::move(n));
}

namespace detail {

inline Var elementwise_pair(Var a, Var b, OpKind op) {
    check_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Broadcast mode = classify_broadcast(av, bv, op_name(op));
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    n.n_in = 2;
    n.bcast = mode;
    n.requires_grad = a.requires_grad() || b.requires_grad();
    if (mode == Broadcast::none) {
        Tensor out = av;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = av[i], y = bv[i];
            out[i] = op == OpKind::add ? x + y : op == OpKind::sub ? x - y : x * y;
        }
        n.value = std::move(out);
    } else {
        Tensor out = Tensor::zeros(av.shape());
        for (std::size_t r = 0; r < av.rows(); ++r) {
            for (std::size_t c = 0; c < av.cols(); ++c) {
                const double x = av.at(r, c);
                const double y = broadcast_pick(bv, mode, r, c);
                out.at(r, c) = op == OpKind::add ? x + y : op == OpKind::sub ? x - y : x * y;
            }
        }
        n.value = std::move(out);
    }
    return a.tape->push(std::move(n));
}

} // namespace detail

inline Var add(Var a, Var b) { return detail::elementwise_pair(a, b, OpKind::add); }
inline Var sub(Var a, Var b) { return detail::elementwise_pair(a, b, OpKind::sub); }
inline Var mul(Var a, Var b) { return detail::elementwise_pair(a, b, OpKind::mul); }

inline Var scale(Var a, double c) {
    detail::Node n;
    n.op = OpKind::scale;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.attr = c;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    n.value = std::move(out);
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

namespace detail {

inline Var elementwise_unary(Var a, OpKind op) {
    Node n;
    n.op = op;
    n.in = {a.id, 0};
    n.n_in = 1;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        switch (op) {
            case OpKind::relu: out[i] = x > 0.0 ? x : 0.0; break;
            case OpKind::exp: out[i] = std::exp(x); break;
            case OpKind::log:
                if (!std::isfinite(x)) {
                    throw NumericError("log of non-finite value");
                }
                if (x <= 0.0) {
                    throw DomainError("log of non-positive value " + std::to_string(x));
                }
                out[i] = std::log(x);
                break;
            case OpKind::square: out[i] = x * x; break;
            default: break;
        }
    }
    n.value = std::move(out);
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

} // namespace detail

inline Var relu(Var a) { return detail::elementwise_unary(a, OpKind::relu); }
inline Var exp(Var a) { return detail::elementwise_unary(a, OpKind::exp); }
inline Var log(Var a) { return detail::elementwise_unary(a, OpKind::log); }
inline Var square(Var a) { return detail::elementwise_unary(a, OpKind::square); }

namespace detail {

inline Var full_reduce(Var a, OpKind op) {
    Node n;
    n.op = op;
    n.in = {a.id, 0};
    n.n_in = 1;
    double acc = 0.0;
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
    if (op == OpKind::mean) acc /= static_cast<double>(av.size());
    n.value = Tensor::scalar(acc);
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

// Row extrema. Rank-1 input reduces to a scalar, rank-2 to (n x 1).
// Ties go to the lowest index; backward routes there and only there.
inline Var arg_reduce(Var a, OpKind op) {
    const Tensor& av = a.value();
    if (av.rank() == 0 || av.rank() > 2) {
        throw ShapeError(std::string(op_name(op)) + " expects rank-1 or rank-2 input");
    }
    const bool is_max = op == OpKind::max_reduce;
    const std::size_t nrows = av.rank() == 2 ? av.rows() : 1;
    const std::size_t ncols = av.rank() == 2 ? av.cols() : av.size();
    Node n;
    n.op = op;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.indices.resize(nrows);
    std::vector<double> vals(nrows);
    for (std::size_t r = 0; r < nrows; ++r) {
        std::size_t best = r * ncols;
        for (std::size_t c = 1; c < ncols; ++c) {
            const std::size_t i = r * ncols + c;
            if (is_max ? av[i] > av[best] : av[i] < av[best]) best = i;
        }
        n.indices[r] = best;
        vals[r] = av[best];
    }
    n.value = av.rank() == 2 ? Tensor({nrows, 1}, std::move(vals))
                             : Tensor::scalar(vals[0]);
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

// Shared stable row softmax; writes softmax into p, log-softmax into ls.
inline void softmax_fill(const Tensor& x, std::size_t nrows, std::size_t ncols,
                         std::vector<double>& p, std::vector<double>& ls) {
    for (std::size_t r = 0; r < nrows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < ncols; ++c) m = std::max(m, x[r * ncols + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < ncols; ++c) z += std::exp(x[r * ncols + c] - m);
        const double logz = std::log(z);
        for (std::size_t c = 0; c < ncols; ++c) {
            const std::size_t i = r * ncols + c;
            ls[i] = (x[i] - m) - logz;
            p[i] = std::exp(ls[i]);
        }
    }
}

inline Var softmax_like(Var a, OpKind op) {
    const Tensor& av = a.value();
    if (av.rank() == 0 || av.rank() > 2) {
        throw ShapeError(std::string(op_name(op)) + " expects rank-1 or rank-2 input");
    }
    const std::size_t nrows = av.rank() == 2 ? av.rows() : 1;
    const std::size_t ncols = av.rank() == 2 ? av.cols() : av.size();
    std::vector<double> p(av.size()), ls(av.size());
    softmax_fill(av, nrows, ncols, p, ls);
    Node n;
    n.op = op;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.value = Tensor(av.shape(), op == OpKind::softmax_rows ? std::move(p) : std::move(ls));
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

} // namespace detail

inline Var sum(Var a) { return detail::full_reduce(a, OpKind::sum); }
inline Var mean(Var a) { return detail::full_reduce(a, OpKind::mean); }
inline Var max_reduce(Var a) { return detail::arg_reduce(a, OpKind::max_reduce); }
inline Var min_reduce(Var a) { return detail::arg_reduce(a, OpKind::min_reduce); }
inline Var softmax_rows(Var a) { return detail::softmax_like(a, OpKind::softmax_rows); }
inline Var log_softmax_rows(Var a) { return detail::softmax_like(a, OpKind::log_softmax_rows); }

// Row L2 norms, (n x d) -> (n x 1). Norms below min_norm are clamped to it;
// clamped rows get zero gradient and bump the tape's numeric-warning count.
inline Var l2_norm_rows(Var a, double min_norm = 0.0) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ShapeError("l2-norm-rows expects rank-2 input");
    detail::Node n;
    n.op = OpKind::l2_norm_rows;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.attr = min_norm;
    std::vector<double> vals(av.rows());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < av.cols(); ++c) ss += av.at(r, c) * av.at(r, c);
        const double raw = std::sqrt(ss);
        if (raw < min_norm) {
            vals[r] = min_norm;
            a.tape->note_numeric_warning();
        } else {
            vals[r] = raw;
        }
    }
    n.value = Tensor({av.rows(), 1}, std::move(vals));
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

inline Var concat_rows(Var a, Var b) {
    detail::check_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
        throw ShapeError("concat-rows expects rank-2 tensors with equal column counts");
    }
    detail::Node n;
    n.op = OpKind::concat_rows;
    n.in = {a.id, b.id};
    n.n_in = 2;
    std::vector<double> data;
    data.reserve(av.size() + bv.size());
    data.insert(data.end(), av.buffer().begin(), av.buffer().end());
    data.insert(data.end(), bv.buffer().begin(), bv.buffer().end());
    n.value = Tensor({av.rows() + bv.rows(), av.cols()}, std::move(data));
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return a.tape->push(std::move(n));
}

inline Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ShapeError("gather-rows expects rank-2 input");
    if (rows.empty()) throw ShapeError("gather-rows needs at least one row index");
    detail::Node n;
    n.op = OpKind::gather_rows;
    n.in = {a.id, 0};
    n.n_in = 1;
    n.indices = rows;
    Tensor out = Tensor::zeros({rows.size(), av.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= av.rows()) throw ShapeError("gather-rows index out of range");
        for (std::size_t c = 0; c < av.cols(); ++c) out.at(r, c) = av.at(rows[r], c);
    }
    n.value = std::move(out);
    n.requires_grad = a.requires_grad();
    return a.tape->push(std::move(n));
}

// D[i][j] = squared Euclidean distance between row i of a and row j of b.
inline Var pairwise_sqdist(Var a, Var b) {
    detail::check_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
        throw ShapeError("pairwise-sqdist expects rank-2 tensors with equal column counts");
    }
    detail::Node n;
    n.op = OpKind::pairwise_sqdist;
    n.in = {a.id, b.id};
    n.n_in = 2;
    Tensor out = Tensor::zeros({av.rows(), bv.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i) {
        for (std::size_t j = 0; j < bv.rows(); ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < av.cols(); ++c) {
                const double diff = av.at(i, c) - bv.at(j, c);
                d += diff * diff;
            }
            out.at(i, j) = d;
        }
    }
    n.value = std::move(out);
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return a.tape->push(std::move(n));
}

inline Gradients Tape::backward(Var loss) const {
    if (empty()) throw Error("backward on empty tape");
    if (loss.tape != this) throw Error("loss is not on this tape");
    const detail::Node& loss_node = nodes_[loss.id];
    if (loss_node.value.size() != 1) {
        throw ShapeError("backward requires a scalar loss, got " +
                         shape_str(loss_node.value.shape()));
    }

    Gradients grads;
    grads.by_node_.resize(nodes_.size());
    grads.by_node_[loss.id] = Tensor(loss_node.value.shape(),
                                     std::vector<double>(1, 1.0));

    auto accum = [&](std::size_t id, Tensor g) {
        auto& slot = grads.by_node_[id];
        if (!slot) {
            slot = std::move(g);
        } else {
            Tensor& t = *slot;
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += g[i];
        }
    };

    for (std::size_t id = loss.id + 1; id-- > 0;) {
        const detail::Node& n = nodes_[id];
        if (!grads.by_node_[id] || n.op == OpKind::leaf || !n.requires_grad) continue;
        const Tensor& g = *grads.by_node_[id];
        const Tensor& out = n.value;
        const Tensor& a = nodes_[n.in[0]].value;
        const bool need_a = nodes_[n.in[0]].requires_grad;
        const bool need_b = n.n_in == 2 && nodes_[n.in[1]].requires_grad;

        switch (n.op) {
            case OpKind::matmul: {
                const Tensor& b = nodes_[n.in[1]].value;
                if (need_a) {
                    // C = A B   -> dA = G B^T ; C = A B^T -> dA = G B
                    accum(n.in[0], detail::matmul_raw(g, b, false, !n.trans_b));
                }
                if (need_b) {
                    // C = A B   -> dB = A^T G ; C = A B^T -> dB = G^T A
                    accum(n.in[1], n.trans_b ? detail::matmul_raw(g, a, true, false)
                                             : detail::matmul_raw(a, g, true, false));
                }
                break;
            }
            case OpKind::add:
            case OpKind::sub: {
                const double sign = n.op == OpKind::add ? 1.0 : -1.0;
                if (need_a) accum(n.in[0], g);
                if (need_b) {
                    const Tensor& b = nodes_[n.in[1]].value;
                    Tensor gb = n.bcast == detail::Broadcast::none
                                    ? g
                                    : detail::reduce_to_broadcast(g, b, n.bcast);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= sign;
                    accum(n.in[1], std::move(gb));
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& b = nodes_[n.in[1]].value;
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    if (n.bcast == detail::Broadcast::none) {
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * b[i];
                    } else {
                        for (std::size_t r = 0; r < a.rows(); ++r) {
                            for (std::size_t c = 0; c < a.cols(); ++c) {
                                ga.at(r, c) = g.at(r, c) * detail::broadcast_pick(b, n.bcast, r, c);
                            }
                        }
                    }
                    accum(n.in[0], std::move(ga));
                }
                if (need_b) {
                    if (n.bcast == detail::Broadcast::none) {
                        Tensor gb = Tensor::zeros(b.shape());
                        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * a[i];
                        accum(n.in[1], std::move(gb));
                    } else {
                        Tensor prod = Tensor::zeros(a.shape());
                        for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = g[i] * a[i];
                        accum(n.in[1], detail::reduce_to_broadcast(prod, b, n.bcast));
                    }
                }
                break;
            }
            case OpKind::scale: {
                if (need_a) {
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= n.attr;
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::relu: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                        ga[i] = a[i] > 0.0 ? g[i] : 0.0;
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::exp: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * out[i];
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::log: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] / a[i];
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::square: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = 2.0 * a[i] * g[i];
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::sum:
            case OpKind::mean: {
                if (need_a) {
                    const double gv = n.op == OpKind::sum
                                          ? g[0]
                                          : g[0] / static_cast<double>(a.size());
                    accum(n.in[0], Tensor::full(a.shape(), gv));
                }
                break;
            }
            case OpKind::max_reduce:
            case OpKind::min_reduce: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t r = 0; r < n.indices.size(); ++r) {
                        ga[n.indices[r]] += g[r];
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::softmax_rows: {
                if (need_a) {
                    const std::size_t nrows = out.rank() == 2 ? out.rows() : 1;
                    const std::size_t ncols = out.size() / nrows;
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t r = 0; r < nrows; ++r) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < ncols; ++c) {
                            const std::size_t i = r * ncols + c;
                            dot += g[i] * out[i];
                        }
                        for (std::size_t c = 0; c < ncols; ++c) {
                            const std::size_t i = r * ncols + c;
                            ga[i] = out[i] * (g[i] - dot);
                        }
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::log_softmax_rows: {
                if (need_a) {
                    const std::size_t nrows = out.rank() == 2 ? out.rows() : 1;
                    const std::size_t ncols = out.size() / nrows;
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t r = 0; r < nrows; ++r) {
                        double gsum = 0.0;
                        for (std::size_t c = 0; c < ncols; ++c) gsum += g[r * ncols + c];
                        for (std::size_t c = 0; c < ncols; ++c) {
                            const std::size_t i = r * ncols + c;
                            ga[i] = g[i] - std::exp(out[i]) * gsum;
                        }
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::l2_norm_rows: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t r = 0; r < a.rows(); ++r) {
                        double ss = 0.0;
                        for (std::size_t c = 0; c < a.cols(); ++c) ss += a.at(r, c) * a.at(r, c);
                        const double raw = std::sqrt(ss);
                        if (raw < n.attr || raw == 0.0) continue; // clamped row: subgradient 0
                        const double s = g[r] / raw;
                        for (std::size_t c = 0; c < a.cols(); ++c) ga.at(r, c) = s * a.at(r, c);
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::concat_rows: {
                const Tensor& b = nodes_[n.in[1]].value;
                const std::size_t split = a.size();
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t i = 0; i < split; ++i) ga[i] = g[i];
                    accum(n.in[0], std::move(ga));
                }
                if (need_b) {
                    Tensor gb = Tensor::zeros(b.shape());
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[split + i];
                    accum(n.in[1], std::move(gb));
                }
                break;
            }
            case OpKind::gather_rows: {
                if (need_a) {
                    Tensor ga = Tensor::zeros(a.shape());
                    for (std::size_t r = 0; r < n.indices.size(); ++r) {
                        for (std::size_t c = 0; c < a.cols(); ++c) {
                            ga.at(n.indices[r], c) += g.at(r, c);
                        }
                    }
                    accum(n.in[0], std::move(ga));
                }
                break;
            }
            case OpKind::pairwise_sqdist: {
                const Tensor& b = nodes_[n.in[1]].value;
                Tensor ga = Tensor::zeros(a.shape());
                Tensor gb = Tensor::zeros(b.shape());
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    for (std::size_t j = 0; j < b.rows(); ++j) {
                        const double gv = g.at(i, j);
                        if (gv == 0.0) continue;
                        for (std::size_t c = 0; c < a.cols(); ++c) {
                            const double diff = 2.0 * (a.at(i, c) - b.at(j, c)) * gv;
                            ga.at(i, c) += diff;
                            gb.at(j, c) -= diff;
                        }
                    }
                }
                if (need_a) accum(n.in[0], std::move(ga));
                if (need_b) accum(n.in[1], std::move(gb));
                break;
            }
            case OpKind::leaf:
                break;
        }
    }

    return grads;
}

} // namespace metfa
