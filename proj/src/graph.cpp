#include "edlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "edlab/error.hpp"
#include "edlab/kernels.hpp"

namespace edlab {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape));
}

Graph& same_graph(Var a, Var b) {
    if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
    return a.graph();
}

constexpr float kSqrt2OverPi = 0.7978845608028654f;
constexpr float kGeluCoeff = 0.044715f;

}  // namespace

// ---- Graph ---------------------------------------------------------------

Var Graph::input(Tensor value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::param(const Tensor& value) {
    Node n;
    n.external = &value;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Graph::value(std::uint32_t id) const { return nodes_.at(id).value(); }

const Tensor* Graph::grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? &n.grad : nullptr;
}

Tensor& Graph::grad_acc(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value().shape);
        n.has_grad = true;
    }
    return n.grad;
}

void Graph::backward(Var loss, std::span<const Var> wrt) {
    if (&loss.graph() != this) throw ContractError("backward: loss is not on this graph");
    if (loss.value().size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.value().shape));

    for (auto& n : nodes_) {
        n.needs_grad = false;
        n.has_grad = false;
        n.grad = Tensor();
    }
    for (const Var& v : wrt) {
        if (&v.graph() != this) throw ContractError("backward: wrt tensor is not on this graph");
        nodes_[v.id()].needs_grad = true;
    }
    const std::uint32_t last = loss.id();
    for (std::uint32_t i = 0; i <= last; ++i) {
        Node& n = nodes_[i];
        if (n.needs_grad) continue;
        for (auto in : n.inputs)
            if (nodes_[in].needs_grad) {
                n.needs_grad = true;
                break;
            }
    }

    if (nodes_[last].needs_grad) {
        grad_acc(last).data[0] = 1.0f;
        for (std::uint32_t i = last + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || !n.has_grad || !n.backward) continue;
            n.backward(*this, i);
        }
    }
    // Requested tensors unreachable from the loss get an explicit zero.
    for (const Var& v : wrt) grad_acc(v.id());
}

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b) {
    Graph& g = same_graph(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
    return g.record(std::move(out), {a.id(), b.id()}, [](Graph& g, std::uint32_t self) {
        const Tensor& go = g.grad_of(self);
        for (auto in : g.inputs(self)) {
            if (!g.needs_grad(in)) continue;
            auto& gi = g.grad_acc(in).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i];
        }
    });
}

Var sub(Var a, Var b) {
    Graph& g = same_graph(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
    return g.record(std::move(out), {a.id(), b.id()}, [](Graph& g, std::uint32_t self) {
        const Tensor& go = g.grad_of(self);
        const auto ia = g.inputs(self)[0], ib = g.inputs(self)[1];
        if (g.needs_grad(ia)) {
            auto& gi = g.grad_acc(ia).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i];
        }
        if (g.needs_grad(ib)) {
            auto& gi = g.grad_acc(ib).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go.data[i];
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = same_graph(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
    return g.record(std::move(out), {a.id(), b.id()}, [](Graph& g, std::uint32_t self) {
        const Tensor& go = g.grad_of(self);
        const auto ia = g.inputs(self)[0], ib = g.inputs(self)[1];
        if (g.needs_grad(ia)) {
            const auto& bv = g.value(ib).data;
            auto& gi = g.grad_acc(ia).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i] * bv[i];
        }
        if (g.needs_grad(ib)) {
            const auto& av = g.value(ia).data;
            auto& gi = g.grad_acc(ib).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i] * av[i];
        }
    });
}

Var scale(Var a, float s) {
    Tensor out = a.value();
    for (float& v : out.data) v *= s;
    return a.graph().record(std::move(out), {a.id()}, [s](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const Tensor& go = g.grad_of(self);
        auto& gi = g.grad_acc(in).data;
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i] * s;
    });
}

Var add_bias(Var x, Var b) {
    Graph& g = same_graph(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (bv.rank() != 1 || bv.size() != xv.cols())
        throw DimensionError("add_bias: bias " + shape_str(bv.shape) + " for input " + shape_str(xv.shape));
    Tensor out = xv;
    const std::size_t n = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) out.data[r * n + j] += bv.data[j];
    return g.record(std::move(out), {x.id(), b.id()}, [](Graph& g, std::uint32_t self) {
        const Tensor& go = g.grad_of(self);
        const auto ix = g.inputs(self)[0], ib = g.inputs(self)[1];
        if (g.needs_grad(ix)) {
            auto& gi = g.grad_acc(ix).data;
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go.data[i];
        }
        if (g.needs_grad(ib)) {
            auto& gb = g.grad_acc(ib).data;
            const std::size_t n = gb.size();
            for (std::size_t r = 0; r < go.size() / n; ++r)
                for (std::size_t j = 0; j < n; ++j) gb[j] += go.data[r * n + j];
        }
    });
}

Var gelu(Var a) {
    Tensor out = a.value();
    for (float& v : out.data) {
        const float x = v;
        v = 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
    }
    return a.graph().record(std::move(out), {a.id()}, [](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& x = g.value(in).data;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t i = 0; i < gi.size(); ++i) {
            const float xi = x[i];
            const float u = kSqrt2OverPi * (xi + kGeluCoeff * xi * xi * xi);
            const float t = std::tanh(u);
            const float du = kSqrt2OverPi * (1.0f + 3.0f * kGeluCoeff * xi * xi);
            gi[i] += go[i] * (0.5f * (1.0f + t) + 0.5f * xi * (1.0f - t * t) * du);
        }
    });
}

Var abs(Var a) {
    Tensor out = a.value();
    for (float& v : out.data) v = std::fabs(v);
    return a.graph().record(std::move(out), {a.id()}, [](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& x = g.value(in).data;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t i = 0; i < gi.size(); ++i) {
            // Subgradient 0 at the kink.
            if (x[i] > 0.0f) gi[i] += go[i];
            else if (x[i] < 0.0f) gi[i] -= go[i];
        }
    });
}

Var sum(Var a) {
    double acc = 0.0;
    for (float v : a.value().data) acc += v;
    Tensor out({1}, {static_cast<float>(acc)});
    return a.graph().record(std::move(out), {a.id()}, [](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const float go = g.grad_of(self).data[0];
        for (float& v : g.grad_acc(in).data) v += go;
    });
}

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph& g = same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    if (av.shape[1] != bv.shape[0])
        throw DimensionError("matmul: inner dimensions " + shape_str(av.shape) + " . " + shape_str(bv.shape));
    const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out({m, n});
    kernels::parallel::gemm(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return g.record(std::move(out), {a.id(), b.id()}, [m, k, n](Graph& g, std::uint32_t self) {
        const Tensor& go = g.grad_of(self);
        const auto ia = g.inputs(self)[0], ib = g.inputs(self)[1];
        if (g.needs_grad(ia))  // dA = dC . B^T
            kernels::parallel::gemm_nt_acc(go.data.data(), g.value(ib).data.data(), g.grad_acc(ia).data.data(), m,
                                           k, n);
        if (g.needs_grad(ib))  // dB = A^T . dC
            kernels::parallel::gemm_tn_acc(g.value(ia).data.data(), go.data.data(), g.grad_acc(ib).data.data(), m,
                                           k, n);
    });
}

// ---- normalization -------------------------------------------------------

Var softmax_rows(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape);
    const std::size_t n = av.cols();
    for (std::size_t r = 0; r < av.rows(); ++r) {
        const float* x = av.data.data() + r * n;
        float* y = out.data.data() + r * n;
        const float mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    return a.graph().record(std::move(out), {a.id()}, [n](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& y = g.value(self).data;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t r = 0; r < y.size() / n; ++r) {
            const float* yr = y.data() + r * n;
            const float* gr = go.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += double(yr[j]) * gr[j];
            for (std::size_t j = 0; j < n; ++j) gi[r * n + j] += yr[j] * (gr[j] - static_cast<float>(dot));
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
    Graph& g = same_graph(x, gamma);
    same_graph(x, beta);
    if (!(eps > 0.0f)) throw ContractError("layer_norm: eps must be positive");
    const Tensor& xv = x.value();
    const std::size_t d = xv.cols();
    if (gamma.value().shape != Shape{d} || beta.value().shape != Shape{d})
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    const std::size_t rows = xv.rows();
    Tensor out(xv.shape);
    auto xhat = std::make_shared<std::vector<float>>(xv.size());
    auto rstd = std::make_shared<std::vector<float>>(rows);
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xv.data.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= double(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = static_cast<float>(rs);
        for (std::size_t j = 0; j < d; ++j) {
            const float h = static_cast<float>((xr[j] - mean) * rs);
            (*xhat)[r * d + j] = h;
            out.data[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return g.record(std::move(out), {x.id(), gamma.id(), beta.id()},
                    [d, xhat, rstd](Graph& g, std::uint32_t self) {
                        const auto ix = g.inputs(self)[0], ig = g.inputs(self)[1], ib = g.inputs(self)[2];
                        const auto& go = g.grad_of(self).data;
                        const std::size_t rows = go.size() / d;
                        if (g.needs_grad(ig)) {
                            auto& gg = g.grad_acc(ig).data;
                            for (std::size_t i = 0; i < go.size(); ++i) gg[i % d] += go[i] * (*xhat)[i];
                        }
                        if (g.needs_grad(ib)) {
                            auto& gb = g.grad_acc(ib).data;
                            for (std::size_t i = 0; i < go.size(); ++i) gb[i % d] += go[i];
                        }
                        if (!g.needs_grad(ix)) return;
                        const auto& gv = g.value(ig).data;
                        auto& gx = g.grad_acc(ix).data;
                        for (std::size_t r = 0; r < rows; ++r) {
                            double mean_dh = 0.0, mean_dh_h = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dh = double(go[r * d + j]) * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * (*xhat)[r * d + j];
                            }
                            mean_dh /= double(d);
                            mean_dh_h /= double(d);
                            const double rs = (*rstd)[r];
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dh = double(go[r * d + j]) * gv[j];
                                gx[r * d + j] +=
                                    static_cast<float>(rs * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h));
                            }
                        }
                    });
}

// ---- indexing ------------------------------------------------------------

Var embedding_lookup(Var table, std::span<const Token> ids) {
    const Tensor& tv = table.value();
    require_matrix(tv, "embedding_lookup");
    const std::size_t vocab = tv.shape[0], d = tv.shape[1];
    if (ids.empty()) throw DegenerateInputError("embedding_lookup: empty id sequence");
    Tensor out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab)
            throw ContractError("embedding_lookup: id " + std::to_string(ids[t]) + " outside vocabulary of " +
                                std::to_string(vocab));
        std::copy_n(tv.data.data() + ids[t] * d, d, out.data.data() + t * d);
    }
    std::vector<Token> saved(ids.begin(), ids.end());
    return table.graph().record(std::move(out), {table.id()}, [saved, d](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& go = g.grad_of(self).data;
        auto& gt = g.grad_acc(in).data;
        for (std::size_t t = 0; t < saved.size(); ++t)
            for (std::size_t j = 0; j < d; ++j) gt[saved[t] * d + j] += go[t * d + j];
    });
}

Var concat(Var a, Var b) {
    Graph& g = same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != bv.rank() || !std::equal(av.shape.begin(), av.shape.end() - 1, bv.shape.begin()))
        throw DimensionError("concat: " + shape_str(av.shape) + " with " + shape_str(bv.shape));
    const std::size_t p = av.cols(), q = bv.cols(), rows = av.rows();
    Shape s = av.shape;
    s.back() = p + q;
    Tensor out(s);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data.data() + r * p, p, out.data.data() + r * (p + q));
        std::copy_n(bv.data.data() + r * q, q, out.data.data() + r * (p + q) + p);
    }
    return g.record(std::move(out), {a.id(), b.id()}, [p, q, rows](Graph& g, std::uint32_t self) {
        const auto& go = g.grad_of(self).data;
        const auto ia = g.inputs(self)[0], ib = g.inputs(self)[1];
        if (g.needs_grad(ia)) {
            auto& ga = g.grad_acc(ia).data;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += go[r * (p + q) + j];
        }
        if (g.needs_grad(ib)) {
            auto& gb = g.grad_acc(ib).data;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += go[r * (p + q) + p + j];
        }
    });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
    const Tensor& av = a.value();
    require_matrix(av, "slice_rows");
    if (count == 0 || start + count > av.shape[0])
        throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") of " + shape_str(av.shape));
    const std::size_t d = av.shape[1];
    Tensor out({count, d});
    std::copy_n(av.data.data() + start * d, count * d, out.data.data());
    return a.graph().record(std::move(out), {a.id()}, [start, d](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t i = 0; i < go.size(); ++i) gi[start * d + i] += go[i];
    });
}

Var reshape(Var a, Shape shape) {
    if (numel(shape) != a.value().size())
        throw DimensionError("reshape: " + shape_str(a.value().shape) + " to " + shape_str(shape));
    Tensor out(std::move(shape), a.value().data);
    return a.graph().record(std::move(out), {a.id()}, [](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
}

Var row(Var a, std::size_t r) {
    const Tensor& av = a.value();
    if (r >= av.rows()) throw ContractError("row: index " + std::to_string(r) + " out of " + shape_str(av.shape));
    const std::size_t d = av.cols();
    Tensor out({d});
    std::copy_n(av.data.data() + r * d, d, out.data.data());
    return a.graph().record(std::move(out), {a.id()}, [r, d](Graph& g, std::uint32_t self) {
        const auto in = g.inputs(self)[0];
        if (!g.needs_grad(in)) return;
        const auto& go = g.grad_of(self).data;
        auto& gi = g.grad_acc(in).data;
        for (std::size_t j = 0; j < d; ++j) gi[r * d + j] += go[j];
    });
}

Var with_row(Var base, std::size_t r, Var new_row) {
    Graph& g = same_graph(base, new_row);
    const Tensor& bv = base.value();
    const Tensor& nv = new_row.value();
    if (r >= bv.rows()) throw ContractError("with_row: index " + std::to_string(r) + " out of " + shape_str(bv.shape));
    const std::size_t d = bv.cols();
    if (nv.size() != d) throw DimensionError("with_row: row " + shape_str(nv.shape) + " into " + shape_str(bv.shape));
    Tensor out = bv;
    std::copy_n(nv.data.data(), d, out.data.data() + r * d);
    return g.record(std::move(out), {base.id(), new_row.id()}, [r, d](Graph& g, std::uint32_t self) {
        const auto& go = g.grad_of(self).data;
        const auto ib = g.inputs(self)[0], in = g.inputs(self)[1];
        if (g.needs_grad(ib)) {
            auto& gb = g.grad_acc(ib).data;
            for (std::size_t i = 0; i < go.size(); ++i)
                if (i / d != r) gb[i] += go[i];
        }
        if (g.needs_grad(in)) {
            auto& gn = g.grad_acc(in).data;
            for (std::size_t j = 0; j < d; ++j) gn[j] += go[r * d + j];
        }
    });
}

// ---- attention -----------------------------------------------------------

Var causal_self_attention(Var qkv, std::size_t n_heads) {
    const Tensor& x = qkv.value();
    require_matrix(x, "causal_self_attention");
    if (n_heads == 0 || x.shape[1] % (3 * n_heads) != 0)
        throw DimensionError("causal_self_attention: width " + std::to_string(x.shape[1]) + " not 3 x heads x dim");
    const std::size_t T = x.shape[0], d = x.shape[1] / 3, hd = d / n_heads, w = 3 * d;
    const float sc = 1.0f / std::sqrt(static_cast<float>(hd));
    // probs[h][t][j] for j <= t
    auto probs = std::make_shared<std::vector<float>>(n_heads * T * T, 0.0f);
    Tensor out({T, d});
    const float* X = x.data.data();
    std::vector<float> s(T);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t t = 0; t < T; ++t) {
            const float* q = X + t * w + qo;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j <= t; ++j) {
                const float* k = X + j * w + ko;
                float dot = 0.0f;
                for (std::size_t c = 0; c < hd; ++c) dot += q[c] * k[c];
                s[j] = dot * sc;
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                s[j] = std::exp(s[j] - mx);
                z += s[j];
            }
            const float inv = static_cast<float>(1.0 / z);
            float* p = probs->data() + (h * T + t) * T;
            float* o = out.data.data() + t * d + h * hd;
            for (std::size_t j = 0; j <= t; ++j) {
                p[j] = s[j] * inv;
                const float* v = X + j * w + vo;
                for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * v[c];
            }
        }
    }
    return qkv.graph().record(
        std::move(out), {qkv.id()}, [probs, n_heads, T, d, hd, w, sc](Graph& g, std::uint32_t self) {
            const auto in = g.inputs(self)[0];
            if (!g.needs_grad(in)) return;
            const float* X = g.value(in).data.data();
            const float* G = g.grad_of(self).data.data();
            float* GX = g.grad_acc(in).data.data();
            std::vector<float> dp(T);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
                for (std::size_t t = 0; t < T; ++t) {
                    const float* p = probs->data() + (h * T + t) * T;
                    const float* go = G + t * d + h * hd;
                    double pdp = 0.0;
                    for (std::size_t j = 0; j <= t; ++j) {
                        const float* v = X + j * w + vo;
                        float dot = 0.0f;
                        for (std::size_t c = 0; c < hd; ++c) dot += go[c] * v[c];
                        dp[j] = dot;
                        pdp += double(p[j]) * dot;
                        float* gv = GX + j * w + vo;
                        for (std::size_t c = 0; c < hd; ++c) gv[c] += p[j] * go[c];
                    }
                    const float* q = X + t * w + qo;
                    float* gq = GX + t * w + qo;
                    for (std::size_t j = 0; j <= t; ++j) {
                        const float ds = p[j] * (dp[j] - static_cast<float>(pdp)) * sc;
                        if (ds == 0.0f) continue;
                        const float* k = X + j * w + ko;
                        float* gk = GX + j * w + ko;
                        for (std::size_t c = 0; c < hd; ++c) {
                            gq[c] += ds * k[c];
                            gk[c] += ds * q[c];
                        }
                    }
                }
            }
        });
}

// ---- loss ----------------------------------------------------------------

Var cross_entropy(Var logits, std::span<const Token> targets, std::span<const std::uint8_t> mask) {
    const Tensor& lv = logits.value();
    require_matrix(lv, "cross_entropy");
    const std::size_t T = lv.shape[0], V = lv.shape[1];
    if (targets.size() != T || mask.size() != T)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(mask.size()) + " mask entries for " + std::to_string(T) + " rows");
    std::size_t count = 0;
    for (std::size_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V)
            throw ContractError("cross_entropy: target " + std::to_string(targets[t]) + " outside vocabulary");
        ++count;
    }
    if (count == 0) throw DegenerateInputError("cross_entropy: mask selects no position");

    auto probs = std::make_shared<std::vector<float>>(T * V, 0.0f);
    double total = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        const float* x = lv.data.data() + t * V;
        const float mx = *std::max_element(x, x + V);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(double(x[j]) - mx);
        const double lse = mx + std::log(z);
        total += lse - x[targets[t]];
        float* p = probs->data() + t * V;
        for (std::size_t j = 0; j < V; ++j) p[j] = static_cast<float>(std::exp(double(x[j]) - lse));
    }
    const double n = static_cast<double>(count);
    Tensor out({1}, {static_cast<float>(total / n)});
    std::vector<Token> tgt(targets.begin(), targets.end());
    Mask msk(mask.begin(), mask.end());
    return logits.graph().record(
        std::move(out), {logits.id()}, [probs, tgt, msk, n, V](Graph& g, std::uint32_t self) {
            const auto in = g.inputs(self)[0];
            if (!g.needs_grad(in)) return;
            const float go = static_cast<float>(g.grad_of(self).data[0] / n);
            auto& gi = g.grad_acc(in).data;
            for (std::size_t t = 0; t < tgt.size(); ++t) {
                if (!msk[t]) continue;
                const float* p = probs->data() + t * V;
                for (std::size_t j = 0; j < V; ++j) gi[t * V + j] += go * p[j];
                gi[t * V + tgt[t]] -= go;
            }
        });
}

}  // namespace edlab
