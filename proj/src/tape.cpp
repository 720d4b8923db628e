#include "synergen/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace synergen {

namespace {

// C = C + A * B, all row-major.
void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.row_ptr(p);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C = C + A * B^T.
void gemm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C = C + A^T * B.
void gemm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int m = a.cols(), k = a.rows(), n = b.cols();
    for (int p = 0; p < k; ++p) {
        const double* arow = a.row_ptr(p);
        const double* brow = b.row_ptr(p);
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.row_ptr(i);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

int Tape::push(Tensor v, bool requires_grad, std::function<void()> backprop) {
    v.check_finite("op output");
    nodes_.push_back(Node{std::move(v), Tensor{}, requires_grad, std::move(backprop)});
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.data().empty()) n.grad = Tensor::zeros(n.val.rows(), n.val.cols());
    return n.grad;
}

void Tape::check_index(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) throw std::out_of_range("Tape: bad node id");
}

const Tensor& Tape::grad(int id) const {
    check_index(id);
    static const Tensor empty;
    return nodes_[id].grad.data().empty() ? empty : nodes_[id].grad;
}

std::vector<int> Tape::touched_rows(int id) const {
    auto it = touched_.find(id);
    if (it == touched_.end()) return {};
    std::set<int> uniq(it->second.begin(), it->second.end());
    return std::vector<int>(uniq.begin(), uniq.end());
}

int Tape::leaf(Tensor v, bool requires_grad) {
    v.check_finite("leaf");
    return push(std::move(v), requires_grad, {});
}

int Tape::matmul(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (va.cols() != vb.rows())
        throw std::invalid_argument("matmul: shape mismatch " + va.shape_str() + " * " + vb.shape_str());
    Tensor out(va.rows(), vb.cols());
    gemm_acc(va, vb, out);
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) gemm_nt_acc(g, nodes_[b].val, grad_buf(a));
        if (needs(b)) gemm_tn_acc(nodes_[a].val, g, grad_buf(b));
    };
    return id;
}

int Tape::matmul_nt(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (va.cols() != vb.cols())
        throw std::invalid_argument("matmul_nt: shape mismatch " + va.shape_str() + " * " + vb.shape_str() + "^T");
    Tensor out(va.rows(), vb.rows());
    gemm_nt_acc(va, vb, out);
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) gemm_acc(g, nodes_[b].val, grad_buf(a));
        if (needs(b)) gemm_tn_acc(g, nodes_[a].val, grad_buf(b));
    };
    return id;
}

int Tape::dot(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (va.size() != vb.size()) throw std::invalid_argument("dot: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < va.size(); ++i) acc += va[i] * vb[i];
    int id = push(Tensor::scalar(acc), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const double g = nodes_[id].grad[0];
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            const Tensor& vb2 = nodes_[b].val;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * vb2[i];
        }
        if (needs(b)) {
            Tensor& gb = grad_buf(b);
            const Tensor& va2 = nodes_[a].val;
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g * va2[i];
        }
    };
    return id;
}

int Tape::add(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        for (int in : {a, b}) {
            if (!needs(in)) continue;
            Tensor& gi = grad_buf(in);
            for (size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
        }
    };
    return id;
}

int Tape::sub(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (!va.same_shape(vb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (needs(b)) {
            Tensor& gb = grad_buf(b);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    };
    return id;
}

int Tape::mul(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (!va.same_shape(vb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            const Tensor& vb2 = nodes_[b].val;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb2[i];
        }
        if (needs(b)) {
            Tensor& gb = grad_buf(b);
            const Tensor& va2 = nodes_[a].val;
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va2[i];
        }
    };
    return id;
}

int Tape::scale(int a, double s) {
    check_index(a);
    Tensor out = nodes_[a].val;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= s;
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a, s]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    };
    return id;
}

int Tape::add_rowvec(int a, int v) {
    check_index(a);
    check_index(v);
    const Tensor& va = nodes_[a].val;
    const Tensor& vv = nodes_[v].val;
    if (vv.rows() != 1 || vv.cols() != va.cols()) throw std::invalid_argument("add_rowvec: shape mismatch");
    Tensor out = va;
    for (int r = 0; r < out.rows(); ++r) {
        double* row = out.row_ptr(r);
        for (int c = 0; c < out.cols(); ++c) row[c] += vv[c];
    }
    int id = push(std::move(out), needs(a) || needs(v), {});
    nodes_[id].backprop = [this, id, a, v]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (needs(v)) {
            Tensor& gv = grad_buf(v);
            for (int r = 0; r < g.rows(); ++r) {
                const double* row = g.row_ptr(r);
                for (int c = 0; c < g.cols(); ++c) gv[c] += row[c];
            }
        }
    };
    return id;
}

int Tape::relu(int a) {
    check_index(a);
    Tensor out = nodes_[a].val;
    for (auto& x : out.data()) x = std::max(x, 0.0);
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& va = nodes_[a].val;
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i)
            if (va[i] > 0.0) ga[i] += g[i];
    };
    return id;
}

int Tape::sigmoid(int a) {
    check_index(a);
    Tensor out = nodes_[a].val;
    for (auto& x : out.data()) x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& y = nodes_[id].val;
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
    return id;
}

int Tape::log(int a) {
    check_index(a);
    Tensor out = nodes_[a].val;
    for (auto& x : out.data()) {
        if (x <= 0.0) throw std::domain_error("log: nonpositive input");
        x = std::log(x);
    }
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& va = nodes_[a].val;
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / va[i];
    };
    return id;
}

int Tape::softplus(int a) {
    check_index(a);
    Tensor out = nodes_[a].val;
    for (auto& x : out.data()) x = stable_softplus(x);
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& va = nodes_[a].val;
        Tensor& ga = grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) {
            const double x = va[i];
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            ga[i] += g[i] * s;
        }
    };
    return id;
}

int Tape::sum(int a) {
    check_index(a);
    double acc = 0.0;
    for (double x : nodes_[a].val.data()) acc += x;
    int id = push(Tensor::scalar(acc), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const double g = nodes_[id].grad[0];
        Tensor& ga = grad_buf(a);
        for (auto& x : ga.data()) x += g;
    };
    return id;
}

int Tape::mean(int a) {
    check_index(a);
    const size_t n = nodes_[a].val.size();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    double acc = 0.0;
    for (double x : nodes_[a].val.data()) acc += x;
    int id = push(Tensor::scalar(acc / static_cast<double>(n)), needs(a), {});
    nodes_[id].backprop = [this, id, a, n]() {
        if (!needs(a)) return;
        const double g = nodes_[id].grad[0] / static_cast<double>(n);
        Tensor& ga = grad_buf(a);
        for (auto& x : ga.data()) x += g;
    };
    return id;
}

int Tape::concat_cols(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (va.rows() != vb.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Tensor out(va.rows(), va.cols() + vb.cols());
    for (int r = 0; r < out.rows(); ++r) {
        std::copy(va.row_ptr(r), va.row_ptr(r) + va.cols(), out.row_ptr(r));
        std::copy(vb.row_ptr(r), vb.row_ptr(r) + vb.cols(), out.row_ptr(r) + va.cols());
    }
    const int ca = va.cols();
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b, ca]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            for (int r = 0; r < ga.rows(); ++r)
                for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g.at(r, c);
        }
        if (needs(b)) {
            Tensor& gb = grad_buf(b);
            for (int r = 0; r < gb.rows(); ++r)
                for (int c = 0; c < gb.cols(); ++c) gb.at(r, c) += g.at(r, c + ca);
        }
    };
    return id;
}

int Tape::concat_rows(int a, int b) {
    check_index(a);
    check_index(b);
    const Tensor& va = nodes_[a].val;
    const Tensor& vb = nodes_[b].val;
    if (va.cols() != vb.cols()) throw std::invalid_argument("concat_rows: col mismatch");
    Tensor out(va.rows() + vb.rows(), va.cols());
    std::copy(va.data().begin(), va.data().end(), out.data().begin());
    std::copy(vb.data().begin(), vb.data().end(), out.data().begin() + va.size());
    const int ra = va.rows();
    int id = push(std::move(out), needs(a) || needs(b), {});
    nodes_[id].backprop = [this, id, a, b, ra]() {
        const Tensor& g = nodes_[id].grad;
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (needs(b)) {
            Tensor& gb = grad_buf(b);
            const size_t off = static_cast<size_t>(ra) * g.cols();
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
        }
    };
    return id;
}

int Tape::slice_cols(int a, int c0, int c1) {
    check_index(a);
    const Tensor& va = nodes_[a].val;
    if (c0 < 0 || c1 > va.cols() || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Tensor out(va.rows(), c1 - c0);
    for (int r = 0; r < out.rows(); ++r)
        std::copy(va.row_ptr(r) + c0, va.row_ptr(r) + c1, out.row_ptr(r));
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a, c0]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_buf(a);
        for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(r, c + c0) += g.at(r, c);
    };
    return id;
}

int Tape::slice_rows(int a, int r0, int r1) {
    check_index(a);
    const Tensor& va = nodes_[a].val;
    if (r0 < 0 || r1 > va.rows() || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Tensor out(r1 - r0, va.cols());
    std::copy(va.row_ptr(r0), va.row_ptr(r0) + out.size(), out.data().begin());
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a, r0]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_buf(a);
        const size_t off = static_cast<size_t>(r0) * g.cols();
        for (size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
    };
    return id;
}

int Tape::gather_rows(int a, std::vector<int> ids) {
    check_index(a);
    const Tensor& va = nodes_[a].val;
    for (int i : ids)
        if (i < 0 || i >= va.rows())
            throw std::out_of_range("gather_rows: id " + std::to_string(i) + " out of range [0, " +
                                    std::to_string(va.rows()) + ")");
    Tensor out(static_cast<int>(ids.size()), va.cols());
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy(va.row_ptr(ids[r]), va.row_ptr(ids[r]) + va.cols(), out.row_ptr(static_cast<int>(r)));
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a, ids = std::move(ids)]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_buf(a);
        auto& touched = touched_[a];
        for (size_t r = 0; r < ids.size(); ++r) {
            touched.push_back(ids[r]);
            double* dst = ga.row_ptr(ids[r]);
            const double* src = g.row_ptr(static_cast<int>(r));
            for (int c = 0; c < g.cols(); ++c) dst[c] += src[c];
        }
    };
    return id;
}

int Tape::repeat_row(int v, int n) {
    check_index(v);
    const Tensor& vv = nodes_[v].val;
    if (vv.rows() != 1) throw std::invalid_argument("repeat_row: input must be a row vector");
    Tensor out(n, vv.cols());
    for (int r = 0; r < n; ++r) std::copy(vv.data().begin(), vv.data().end(), out.row_ptr(r));
    int id = push(std::move(out), needs(v), {});
    nodes_[id].backprop = [this, id, v]() {
        if (!needs(v)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gv = grad_buf(v);
        for (int r = 0; r < g.rows(); ++r) {
            const double* row = g.row_ptr(r);
            for (int c = 0; c < g.cols(); ++c) gv[c] += row[c];
        }
    };
    return id;
}

int Tape::layer_norm(int a, int gain, int bias, double eps) {
    check_index(a);
    check_index(gain);
    check_index(bias);
    const Tensor& va = nodes_[a].val;
    const Tensor& vg = nodes_[gain].val;
    const Tensor& vb = nodes_[bias].val;
    const int d = va.cols();
    if (vg.rows() != 1 || vg.cols() != d || vb.rows() != 1 || vb.cols() != d)
        throw std::invalid_argument("layer_norm: gain/bias must be [1 x cols]");
    Tensor out(va.rows(), d);
    Tensor xhat(va.rows(), d);
    Tensor invstd(va.rows(), 1);
    for (int r = 0; r < va.rows(); ++r) {
        const double* x = va.row_ptr(r);
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += x[c];
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        invstd.at(r, 0) = is;
        for (int c = 0; c < d; ++c) {
            const double xh = (x[c] - mu) * is;
            xhat.at(r, c) = xh;
            out.at(r, c) = xh * vg[c] + vb[c];
        }
    }
    int id = push(std::move(out), needs(a) || needs(gain) || needs(bias), {});
    nodes_[id].backprop = [this, id, a, gain, bias, d, xhat = std::move(xhat), invstd = std::move(invstd)]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& vg = nodes_[gain].val;
        if (needs(gain)) {
            Tensor& gg = grad_buf(gain);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < d; ++c) gg[c] += g.at(r, c) * xhat.at(r, c);
        }
        if (needs(bias)) {
            Tensor& gb = grad_buf(bias);
            for (int r = 0; r < g.rows(); ++r)
                for (int c = 0; c < d; ++c) gb[c] += g.at(r, c);
        }
        if (needs(a)) {
            Tensor& ga = grad_buf(a);
            for (int r = 0; r < g.rows(); ++r) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int c = 0; c < d; ++c) {
                    const double dxh = g.at(r, c) * vg[c];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat.at(r, c);
                }
                const double is = invstd.at(r, 0);
                for (int c = 0; c < d; ++c) {
                    const double dxh = g.at(r, c) * vg[c];
                    ga.at(r, c) += is * (dxh - (sum_dxhat + xhat.at(r, c) * sum_dxhat_xhat) / d);
                }
            }
        }
    };
    return id;
}

int Tape::row_softmax_masked(int logits, const MaskMatrix& mask) {
    check_index(logits);
    const Tensor& vl = nodes_[logits].val;
    if (mask.size() != vl.rows() || vl.cols() != mask.size())
        throw std::invalid_argument("row_softmax_masked: mask shape mismatch");
    const int n = vl.rows();
    Tensor out(n, n);
    for (int r = 0; r < n; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c)
            if (mask.at(r, c)) mx = std::max(mx, vl.at(r, c));
        if (!std::isfinite(mx)) throw std::runtime_error("row_softmax_masked: fully masked row " + std::to_string(r));
        double z = 0.0;
        for (int c = 0; c < n; ++c) {
            if (!mask.at(r, c)) continue;
            const double e = std::exp(vl.at(r, c) - mx);
            out.at(r, c) = e;
            z += e;
        }
        for (int c = 0; c < n; ++c)
            if (mask.at(r, c)) out.at(r, c) /= z;
        // masked entries stay exactly 0
    }
    int id = push(std::move(out), needs(logits), {});
    nodes_[id].backprop = [this, id, logits, mask]() {
        if (!needs(logits)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& p = nodes_[id].val;
        Tensor& gl = grad_buf(logits);
        const int n = p.rows();
        for (int r = 0; r < n; ++r) {
            double gp = 0.0;
            for (int c = 0; c < n; ++c)
                if (mask.at(r, c)) gp += g.at(r, c) * p.at(r, c);
            for (int c = 0; c < n; ++c)
                if (mask.at(r, c)) gl.at(r, c) += p.at(r, c) * (g.at(r, c) - gp);
        }
    };
    return id;
}

int Tape::rope_rotate(int x, Tensor angles) {
    check_index(x);
    const Tensor& vx = nodes_[x].val;
    if (vx.cols() % 2 != 0) throw std::invalid_argument("rope_rotate: odd feature dimension");
    if (angles.rows() != vx.rows() || angles.cols() != vx.cols() / 2)
        throw std::invalid_argument("rope_rotate: angle shape mismatch");
    const int half = vx.cols() / 2;
    Tensor cosines(vx.rows(), half);
    Tensor sines(vx.rows(), half);
    for (int r = 0; r < vx.rows(); ++r)
        for (int k = 0; k < half; ++k) {
            cosines.at(r, k) = std::cos(angles.at(r, k));
            sines.at(r, k) = std::sin(angles.at(r, k));
        }
    Tensor out(vx.rows(), vx.cols());
    for (int r = 0; r < vx.rows(); ++r)
        for (int k = 0; k < half; ++k) {
            const double x0 = vx.at(r, 2 * k);
            const double x1 = vx.at(r, 2 * k + 1);
            const double c = cosines.at(r, k);
            const double s = sines.at(r, k);
            out.at(r, 2 * k) = c * x0 - s * x1;
            out.at(r, 2 * k + 1) = s * x0 + c * x1;
        }
    int id = push(std::move(out), needs(x), {});
    nodes_[id].backprop = [this, id, x, half, cosines = std::move(cosines), sines = std::move(sines)]() {
        if (!needs(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        for (int r = 0; r < g.rows(); ++r)
            for (int k = 0; k < half; ++k) {
                const double g0 = g.at(r, 2 * k);
                const double g1 = g.at(r, 2 * k + 1);
                const double c = cosines.at(r, k);
                const double s = sines.at(r, k);
                gx.at(r, 2 * k) += c * g0 + s * g1;
                gx.at(r, 2 * k + 1) += -s * g0 + c * g1;
            }
    };
    return id;
}

int Tape::logsumexp_rows(int a) {
    check_index(a);
    const Tensor& va = nodes_[a].val;
    Tensor out(va.rows(), 1);
    for (int r = 0; r < va.rows(); ++r) {
        double mx = va.at(r, 0);
        for (int c = 1; c < va.cols(); ++c) mx = std::max(mx, va.at(r, c));
        double z = 0.0;
        for (int c = 0; c < va.cols(); ++c) z += std::exp(va.at(r, c) - mx);
        out.at(r, 0) = mx + std::log(z);
    }
    int id = push(std::move(out), needs(a), {});
    nodes_[id].backprop = [this, id, a]() {
        if (!needs(a)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& y = nodes_[id].val;
        const Tensor& va = nodes_[a].val;
        Tensor& ga = grad_buf(a);
        for (int r = 0; r < va.rows(); ++r) {
            const double gr = g.at(r, 0);
            for (int c = 0; c < va.cols(); ++c) ga.at(r, c) += gr * std::exp(va.at(r, c) - y.at(r, 0));
        }
    };
    return id;
}

void Tape::backward(int loss) {
    check_index(loss);
    const Tensor& v = nodes_[loss].val;
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    grad_buf(loss)[0] = 1.0;
    for (int i = loss; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.grad.data().empty() || !n.backprop) continue;
        n.backprop();
    }
}

}  // namespace synergen
