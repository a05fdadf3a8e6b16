#pragma once

#include "sscdl/common.hpp"

#include <deque>
#include <functional>
#include <string>

// Reverse-mode automatic differentiation over dense double matrices.
// Values are computed eagerly; each operation records a closure that
// propagates the adjoint from its output to its inputs. backward() walks
// the tape in reverse creation order, so gradients of shared
// subexpressions accumulate naturally.
namespace sscdl::ad {

class Tape;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void()> backward;  // reads this node's grad, accumulates into parents
};

class Var {
public:
    Var() = default;
    const Matrix& value() const { return node_->value; }
    const Matrix& grad() const {
        if (!node_->requires_grad) throw NumericError("Var::grad: node does not require gradients");
        return node_->grad;
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Node* node() const { return node_; }
    Tape* tape() const { return tape_; }
    long rows() const { return node_->value.rows(); }
    long cols() const { return node_->value.cols(); }

private:
    friend class Tape;
    Var(Tape* t, Node* n) : tape_(t), node_(n) {}
    Tape* tape_ = nullptr;
    Node* node_ = nullptr;
};

class Tape {
public:
    Var constant(Matrix value) { return emit(std::move(value), false); }

    Var param(Matrix value) { return emit(std::move(value), true); }

    Var emit(Matrix value, bool needs_grad) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.requires_grad = needs_grad;
        if (needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        return Var(this, &n);
    }

    // Accumulates d(loss)/d(node) into every grad-requiring node reachable
    // from loss. loss must be 1 x 1. Grads are not cleared first; a fresh
    // tape per step is the intended usage.
    void backward(const Var& loss) {
        if (loss.rows() != 1 || loss.cols() != 1)
            throw NumericError("Tape::backward: loss must be a 1x1 value");
        if (!loss.node()->requires_grad)
            throw NumericError("Tape::backward: loss does not depend on any parameter");
        bool seen_loss = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (&*it == loss.node()) {
                it->grad(0, 0) += 1.0;
                seen_loss = true;
            }
            if (!seen_loss || !it->requires_grad || !it->backward) continue;
            it->backward();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;  // deque keeps Node addresses stable
};

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* who) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw NumericError(std::string(who) + ": shape mismatch");
}

inline void acc(Node* n, const Matrix& g) {
    if (n->requires_grad) n->grad += g;
}

// Emits the output node and wires the backward closure. build_backward
// receives the output node pointer and returns the closure.
template <typename BuildBackward>
Var unary_op(Var a, Matrix value, BuildBackward build) {
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(value), req);
    if (req) out.node()->backward = build(out.node(), a.node());
    return out;
}

template <typename BuildBackward>
Var binary_op(Var a, Var b, Matrix value, BuildBackward build) {
    bool req = a.requires_grad() || b.requires_grad();
    Var out = a.tape()->emit(std::move(value), req);
    if (req) out.node()->backward = build(out.node(), a.node(), b.node());
    return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
    detail::check_same_shape(a, b, "add");
    return detail::binary_op(a, b, a.value() + b.value(), [](Node* o, Node* na, Node* nb) {
        return [o, na, nb]() {
            detail::acc(na, o->grad);
            detail::acc(nb, o->grad);
        };
    });
}

inline Var sub(Var a, Var b) {
    detail::check_same_shape(a, b, "sub");
    return detail::binary_op(a, b, a.value() - b.value(), [](Node* o, Node* na, Node* nb) {
        return [o, na, nb]() {
            detail::acc(na, o->grad);
            detail::acc(nb, -o->grad);
        };
    });
}

inline Var scale(Var a, double s) {
    return detail::unary_op(a, a.value() * s, [s](Node* o, Node* na) {
        return [o, na, s]() { detail::acc(na, o->grad * s); };
    });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var cmul(Var a, Var b) {
    detail::check_same_shape(a, b, "cmul");
    return detail::binary_op(a, b, a.value().cwiseProduct(b.value()),
                             [](Node* o, Node* na, Node* nb) {
                                 return [o, na, nb]() {
                                     detail::acc(na, o->grad.cwiseProduct(nb->value));
                                     detail::acc(nb, o->grad.cwiseProduct(na->value));
                                 };
                             });
}

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw NumericError("matmul: inner dimension mismatch");
    return detail::binary_op(a, b, a.value() * b.value(), [](Node* o, Node* na, Node* nb) {
        return [o, na, nb]() {
            detail::acc(na, o->grad * nb->value.transpose());
            detail::acc(nb, na->value.transpose() * o->grad);
        };
    });
}

// a * b^T without materializing the transpose on the tape.
inline Var matmul_bt(Var a, Var b) {
    if (a.cols() != b.cols()) throw NumericError("matmul_bt: inner dimension mismatch");
    return detail::binary_op(a, b, a.value() * b.value().transpose(),
                             [](Node* o, Node* na, Node* nb) {
                                 return [o, na, nb]() {
                                     detail::acc(na, o->grad * nb->value);
                                     detail::acc(nb, o->grad.transpose() * na->value);
                                 };
                             });
}

// Sparse constant times dense variable. S is captured by value; the caller
// keeps it alive through the shared_ptr-free copy (sparse matrices are cheap
// to copy relative to training step cost at this scale).
inline Var spmm(const SparseMatrix& s, Var a) {
    if (s.cols() != a.rows()) throw NumericError("spmm: inner dimension mismatch");
    Matrix v = s * a.value();
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        SparseMatrix st = s.transpose();
        out.node()->backward = [o, na, st]() { detail::acc(na, st * o->grad); };
    }
    return out;
}

inline Var exp_elem(Var a) {
    return detail::unary_op(a, a.value().array().exp().matrix(), [](Node* o, Node* na) {
        return [o, na]() { detail::acc(na, o->grad.cwiseProduct(o->value)); };
    });
}

// log with the argument clamped at eps from below. Inputs that hit the clamp
// are counted through clamp_count (may be null); the clamped region has zero
// gradient.
inline Var log_clamped(Var a, double eps = 1e-12, std::size_t* clamp_count = nullptr) {
    const Matrix& x = a.value();
    Matrix clamped = x.cwiseMax(eps);
    if (clamp_count) {
        std::size_t hits = 0;
        for (long j = 0; j < x.cols(); ++j)
            for (long i = 0; i < x.rows(); ++i)
                if (x(i, j) < eps) ++hits;
        *clamp_count += hits;
    }
    Matrix mask = (x.array() >= eps).cast<double>().matrix();
    Matrix v = clamped.array().log().matrix();
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, clamped, mask]() {
            detail::acc(na, (o->grad.array() * mask.array() / clamped.array()).matrix());
        };
    }
    return out;
}

// Rectifier; the subgradient at zero is taken as zero.
// Subgradient 0 at exactly 0. min_abs_input, when given, tracks the smallest
// |entry| seen across calls; callers probing differentiability use it to stay
// clear of the kink.
inline Var relu(Var a, double* min_abs_input = nullptr) {
    if (min_abs_input) {
        double m = a.value().size() > 0 ? a.value().cwiseAbs().minCoeff() : *min_abs_input;
        if (m < *min_abs_input) *min_abs_input = m;
    }
    Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
    Matrix v = a.value().cwiseProduct(mask);
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, mask]() { detail::acc(na, o->grad.cwiseProduct(mask)); };
    }
    return out;
}

// Rows scaled to unit Euclidean norm. A zero row has no defined direction.
inline Var l2_normalize_rows(Var a) {
    const Matrix& x = a.value();
    Vector norms(x.rows());
    for (long i = 0; i < x.rows(); ++i) {
        norms(i) = x.row(i).norm();
        if (norms(i) == 0.0)
            throw NumericError("l2_normalize_rows: zero row has undefined direction");
    }
    Matrix y = norms.cwiseInverse().asDiagonal() * x;
    bool req = a.requires_grad();
    Var out = a.tape()->emit(y, req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, norms]() {
            // d x_r = (g_r - y_r (y_r . g_r)) / ||x_r||
            Matrix gx(o->value.rows(), o->value.cols());
            for (long i = 0; i < o->value.rows(); ++i) {
                double dot = o->value.row(i).dot(o->grad.row(i));
                gx.row(i) = (o->grad.row(i) - o->value.row(i) * dot) / norms(i);
            }
            detail::acc(na, gx);
        };
    }
    return out;
}

inline Var transpose(Var a) {
    Matrix v = a.value().transpose();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            na->grad += o->grad.transpose();
        };
    });
}

inline Var zero_diag(Var a) {
    if (a.rows() != a.cols()) throw NumericError("zero_diag: matrix must be square");
    Matrix v = a.value();
    v.diagonal().setZero();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            Matrix g = o->grad;
            g.diagonal().setZero();
            na->grad += g;
        };
    });
}

// Diagonal of a square matrix as an n x 1 column.
inline Var diag_col(Var a) {
    if (a.rows() != a.cols()) throw NumericError("diag_col: matrix must be square");
    Matrix v = a.value().diagonal();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            na->grad.diagonal() += o->grad.col(0);
        };
    });
}

inline Var row_sum(Var a) {
    Matrix v = a.value().rowwise().sum();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            na->grad += o->grad.col(0).replicate(1, na->value.cols());
        };
    });
}

inline Var col_sum(Var a) {
    Matrix v = a.value().colwise().sum();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            na->grad += o->grad.row(0).replicate(na->value.rows(), 1);
        };
    });
}

inline Var sum_all(Var a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return detail::unary_op(a, std::move(v), [](Node* o, Node* na) {
        return [o, na]() {
            if (!na->requires_grad) return;
            na->grad.array() += o->grad(0, 0);
        };
    });
}

inline Var mean_all(Var a) {
    double n = static_cast<double>(a.rows() * a.cols());
    return scale(sum_all(a), 1.0 / n);
}

// Divide each row i of a by v(i, 0).
inline Var div_colvec(Var a, Var v) {
    if (v.cols() != 1 || v.rows() != a.rows()) throw NumericError("div_colvec: shape mismatch");
    Matrix y = v.value().col(0).cwiseInverse().asDiagonal() * a.value();
    return detail::binary_op(a, v, std::move(y), [](Node* o, Node* na, Node* nv) {
        return [o, na, nv]() {
            Vector inv = nv->value.col(0).cwiseInverse();
            detail::acc(na, inv.asDiagonal() * o->grad);
            if (nv->requires_grad) {
                Vector dv = -(o->grad.cwiseProduct(o->value)).rowwise().sum().cwiseProduct(inv);
                nv->grad.col(0) += dv;
            }
        };
    });
}

// Divide each column j of a by r(0, j).
inline Var div_rowvec(Var a, Var r) {
    if (r.rows() != 1 || r.cols() != a.cols()) throw NumericError("div_rowvec: shape mismatch");
    Matrix y = a.value() * r.value().row(0).cwiseInverse().asDiagonal();
    return detail::binary_op(a, r, std::move(y), [](Node* o, Node* na, Node* nr) {
        return [o, na, nr]() {
            Eigen::RowVectorXd inv = nr->value.row(0).cwiseInverse();
            detail::acc(na, o->grad * inv.asDiagonal());
            if (nr->requires_grad)
                nr->grad.row(0) -=
                    (o->grad.cwiseProduct(o->value)).colwise().sum().cwiseProduct(inv);
        };
    });
}

// Multiply each column j of a by r(0, j).
inline Var mul_rowvec(Var a, Var r) {
    if (r.rows() != 1 || r.cols() != a.cols()) throw NumericError("mul_rowvec: shape mismatch");
    Matrix y = a.value() * r.value().row(0).asDiagonal();
    return detail::binary_op(a, r, std::move(y), [](Node* o, Node* na, Node* nr) {
        return [o, na, nr]() {
            detail::acc(na, o->grad * nr->value.row(0).asDiagonal());
            if (nr->requires_grad)
                nr->grad.row(0) += (o->grad.cwiseProduct(na->value)).colwise().sum();
        };
    });
}

inline Var add_rowvec(Var a, Var r) {
    if (r.rows() != 1 || r.cols() != a.cols()) throw NumericError("add_rowvec: shape mismatch");
    Matrix y = a.value().rowwise() + r.value().row(0);
    return detail::binary_op(a, r, std::move(y), [](Node* o, Node* na, Node* nr) {
        return [o, na, nr]() {
            detail::acc(na, o->grad);
            if (nr->requires_grad) nr->grad.row(0) += o->grad.colwise().sum();
        };
    });
}

// Sums node rows into per-segment rows: out(k, :) = sum over i with
// segment[i] == k of a(i, :). Used for graph readout over packed batches.
inline Var segment_sum(Var a, const std::vector<int>& segment, int n_segments) {
    if (static_cast<long>(segment.size()) != a.rows())
        throw NumericError("segment_sum: segment index length mismatch");
    Matrix v = Matrix::Zero(n_segments, a.cols());
    for (long i = 0; i < a.rows(); ++i) {
        int k = segment[static_cast<std::size_t>(i)];
        if (k < 0 || k >= n_segments) throw NumericError("segment_sum: segment id out of range");
        v.row(k) += a.value().row(i);
    }
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, segment]() {
            for (long i = 0; i < na->value.rows(); ++i)
                na->grad.row(i) += o->grad.row(segment[static_cast<std::size_t>(i)]);
        };
    }
    return out;
}

inline Var gather_rows(Var a, const std::vector<int>& idx) {
    Matrix v(static_cast<long>(idx.size()), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= a.rows()) throw NumericError("gather_rows: index out of range");
        v.row(static_cast<long>(r)) = a.value().row(idx[r]);
    }
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, idx]() {
            for (std::size_t r = 0; r < idx.size(); ++r)
                na->grad.row(idx[r]) += o->grad.row(static_cast<long>(r));
        };
    }
    return out;
}

// out(r, c) = a(rows[r][c], c). Each column c selects its own row subset;
// used to softmax over per-anchor candidate sets.
inline Var gather_entries(Var a, const std::vector<std::vector<int>>& rows) {
    const long R = static_cast<long>(rows.size());
    const long C = a.cols();
    Matrix v(R, C);
    for (long r = 0; r < R; ++r) {
        if (static_cast<long>(rows[static_cast<std::size_t>(r)].size()) != C)
            throw NumericError("gather_entries: row index width mismatch");
        for (long c = 0; c < C; ++c) {
            int src = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            if (src < 0 || src >= a.rows()) throw NumericError("gather_entries: index out of range");
            v(r, c) = a.value()(src, c);
        }
    }
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, rows]() {
            for (long r = 0; r < o->value.rows(); ++r)
                for (long c = 0; c < o->value.cols(); ++c)
                    na->grad(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)], c) +=
                        o->grad(r, c);
        };
    }
    return out;
}

// out(i, 0) = a(i, cols[i]). Picks the target-class entry per row.
inline Var select_cols_per_row(Var a, const std::vector<int>& cols) {
    if (static_cast<long>(cols.size()) != a.rows())
        throw NumericError("select_cols_per_row: index length mismatch");
    Matrix v(a.rows(), 1);
    for (long i = 0; i < a.rows(); ++i) {
        int c = cols[static_cast<std::size_t>(i)];
        if (c < 0 || c >= a.cols()) throw NumericError("select_cols_per_row: column out of range");
        v(i, 0) = a.value()(i, c);
    }
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(v), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na, cols]() {
            for (long i = 0; i < o->value.rows(); ++i)
                na->grad(i, cols[static_cast<std::size_t>(i)]) += o->grad(i, 0);
        };
    }
    return out;
}

inline Var log_softmax_rows(Var a) {
    const Matrix& x = a.value();
    Matrix y(x.rows(), x.cols());
    for (long i = 0; i < x.rows(); ++i) {
        double mx = x.row(i).maxCoeff();
        double lse = std::log((x.row(i).array() - mx).exp().sum()) + mx;
        y.row(i) = x.row(i).array() - lse;
    }
    bool req = a.requires_grad();
    Var out = a.tape()->emit(std::move(y), req);
    if (req) {
        Node* o = out.node();
        Node* na = a.node();
        out.node()->backward = [o, na]() {
            // dX = G - softmax(X) * rowsum(G)
            Matrix soft = o->value.array().exp().matrix();
            Vector rs = o->grad.rowwise().sum();
            na->grad += o->grad - rs.asDiagonal() * soft;
        };
    }
    return out;
}

// Batch normalization over rows (per-column statistics), training mode:
// uses the batch mean and biased batch variance. gamma and beta are 1 x m.
// The batch statistics are reported through batch_mean / batch_var so the
// caller can maintain running averages; they are plain outputs, not tape
// nodes.
inline Var batchnorm_train(Var x, Var gamma, Var beta, double eps,
                           Eigen::RowVectorXd* batch_mean = nullptr,
                           Eigen::RowVectorXd* batch_var = nullptr) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
        beta.cols() != x.cols())
        throw NumericError("batchnorm_train: scale/shift shape mismatch");
    const Matrix& xv = x.value();
    const double n = static_cast<double>(xv.rows());
    Eigen::RowVectorXd mu = xv.colwise().mean();
    Eigen::RowVectorXd var =
        (xv.rowwise() - mu).array().square().colwise().sum().matrix() / n;
    Eigen::RowVectorXd invstd = (var.array() + eps).rsqrt().matrix();
    Matrix xhat = (xv.rowwise() - mu) * invstd.asDiagonal();
    Matrix y = xhat * gamma.value().row(0).asDiagonal();
    y.rowwise() += beta.value().row(0);
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;

    bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Var out = x.tape()->emit(std::move(y), req);
    if (req) {
        Node* o = out.node();
        Node* nx = x.node();
        Node* ng = gamma.node();
        Node* nb = beta.node();
        out.node()->backward = [o, nx, ng, nb, xhat, invstd, n]() {
            const Matrix& g = o->grad;
            if (nb->requires_grad) nb->grad.row(0) += g.colwise().sum();
            if (ng->requires_grad) ng->grad.row(0) += (g.cwiseProduct(xhat)).colwise().sum();
            if (nx->requires_grad) {
                Matrix dxhat = g * ng->value.row(0).asDiagonal();
                Eigen::RowVectorXd s1 = dxhat.colwise().sum();
                Eigen::RowVectorXd s2 = (dxhat.cwiseProduct(xhat)).colwise().sum();
                Matrix dx = dxhat * n;
                dx.rowwise() -= s1;
                dx -= xhat * s2.asDiagonal();
                nx->grad += (dx * invstd.asDiagonal()) / n;
            }
        };
    }
    return out;
}

// Inference mode: normalizes with fixed running statistics; linear in x.
inline Var batchnorm_eval(Var x, Var gamma, Var beta, const Eigen::RowVectorXd& running_mean,
                          const Eigen::RowVectorXd& running_var, double eps) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
        beta.cols() != x.cols())
        throw NumericError("batchnorm_eval: scale/shift shape mismatch");
    Eigen::RowVectorXd invstd = (running_var.array() + eps).rsqrt().matrix();
    Matrix xhat = (x.value().rowwise() - running_mean) * invstd.asDiagonal();
    Matrix y = xhat * gamma.value().row(0).asDiagonal();
    y.rowwise() += beta.value().row(0);
    bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Var out = x.tape()->emit(std::move(y), req);
    if (req) {
        Node* o = out.node();
        Node* nx = x.node();
        Node* ng = gamma.node();
        Node* nb = beta.node();
        out.node()->backward = [o, nx, ng, nb, xhat, invstd]() {
            const Matrix& g = o->grad;
            if (nb->requires_grad) nb->grad.row(0) += g.colwise().sum();
            if (ng->requires_grad) ng->grad.row(0) += (g.cwiseProduct(xhat)).colwise().sum();
            if (nx->requires_grad)
                nx->grad += g * (ng->value.row(0).cwiseProduct(invstd)).asDiagonal();
        };
    }
    return out;
}

}  // namespace sscdl::ad
