#include "edlab/reference.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "edlab/error.hpp"

namespace edlab::reference {

namespace {

// Row-major matrix.
struct Mat {
    std::size_t r = 0, c = 0;
    std::vector<double> v;
    Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
    double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

struct View {
    const Params& names;
    const Values& values;
    const std::vector<double>& operator[](const std::string& n) const { return values[names.index(n)]; }
};

std::string block(std::size_t i, const char* leaf) { return "h" + std::to_string(i) + "." + leaf; }

Mat affine(const Mat& x, const std::vector<double>& w, std::size_t out, const std::vector<double>* b) {
    Mat y(x.r, out);
    for (std::size_t i = 0; i < x.r; ++i)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b ? (*b)[o] : 0.0;
            for (std::size_t k = 0; k < x.c; ++k) acc += x.at(i, k) * w[k * out + o];
            y.at(i, o) = acc;
        }
    return y;
}

Mat norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
    Mat y(x.r, x.c);
    for (std::size_t i = 0; i < x.r; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < x.c; ++j) mean += x.at(i, j);
        mean /= double(x.c);
        for (std::size_t j = 0; j < x.c; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        var /= double(x.c);
        const double rs = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < x.c; ++j) y.at(i, j) = (x.at(i, j) - mean) * rs * g[j] + b[j];
    }
    return y;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

Mat attention(const Mat& qkv, std::size_t heads) {
    const std::size_t T = qkv.r, d = qkv.c / 3, hd = d / heads;
    Mat out(T, d);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> s(t + 1);
            for (std::size_t j = 0; j <= t; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dot += qkv.at(t, h * hd + c) * qkv.at(j, d + h * hd + c);
                s[j] = dot / std::sqrt(double(hd));
            }
            const double mx = *std::max_element(s.begin(), s.end());
            double z = 0.0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j <= t; ++j)
                for (std::size_t c = 0; c < hd; ++c) out.at(t, h * hd + c) += s[j] / z * qkv.at(j, 2 * d + h * hd + c);
        }
    return out;
}

// Final-LN'd hidden states; `hook` may rewrite the residual stream after
// the embedding (layer 0) or after block i (layer i + 1).
Mat transformer(const ModelConfig& c, const View& p, std::span<const Token> tokens,
                const std::function<void(std::size_t, Mat&)>& hook) {
    const std::size_t T = tokens.size(), d = c.d_model;
    Mat x(T, d);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j)
            x.at(t, j) = p["wte"][std::size_t(tokens[t]) * d + j] + p["wpe"][t * d + j];
    if (hook) hook(0, x);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const Mat a = norm(x, p[block(i, "ln1.g")], p[block(i, "ln1.b")]);
        const Mat att = attention(affine(a, p[block(i, "attn.w_qkv")], 3 * d, &p[block(i, "attn.b_qkv")]), c.n_heads);
        const Mat o = affine(att, p[block(i, "attn.w_o")], d, &p[block(i, "attn.b_o")]);
        for (std::size_t k = 0; k < x.v.size(); ++k) x.v[k] += o.v[k];
        Mat hid = affine(norm(x, p[block(i, "ln2.g")], p[block(i, "ln2.b")]), p[block(i, "mlp.w_in")], c.d_ff,
                         &p[block(i, "mlp.b_in")]);
        for (double& e : hid.v) e = gelu(e);
        const Mat m = affine(hid, p[block(i, "mlp.w_out")], d, &p[block(i, "mlp.b_out")]);
        for (std::size_t k = 0; k < x.v.size(); ++k) x.v[k] += m.v[k];
        if (hook) hook(i + 1, x);
    }
    return norm(x, p["ln_f.g"], p["ln_f.b"]);
}

}  // namespace

Values to_double(const Params& params) {
    Values out;
    for (const auto& t : params.tensors()) out.emplace_back(t.value.data.begin(), t.value.data.end());
    return out;
}

Loss edited_loss(const Processor& processor, const Values& processor_values, const Editor& editor,
                 const Values& editor_values, std::span<const Token> instruction, std::span<const Token> inputs,
                 std::span<const Token> targets, const Mask& mask, const EditSpec& spec) {
    if (targets.size() != inputs.size() || mask.size() != inputs.size())
        throw DimensionError("reference: inputs, targets and mask lengths differ");
    const View pv{processor.params, processor_values};
    const View ev{editor.params, editor_values};
    const std::size_t dp = processor.config.d_model;

    const Mat enc = transformer(editor.config, ev, instruction, {});
    Mat last(1, editor.config.d_model);
    for (std::size_t j = 0; j < last.c; ++j) last.at(0, j) = enc.at(enc.r - 1, j);
    const Mat instr = affine(last, ev["proj"], editor.out_width, nullptr);

    Loss loss;
    auto hook = [&](std::size_t layer, Mat& x) {
        if (layer != spec.layer) return;
        std::vector<double> h(dp), edited(dp);
        for (std::size_t j = 0; j < dp; ++j) h[j] = x.at(spec.position, j);
        if (spec.mode == EditMode::add) {
            for (std::size_t j = 0; j < dp; ++j) edited[j] = h[j] + instr.v[j];
        } else {
            Mat in(1, 2 * dp);
            for (std::size_t j = 0; j < dp; ++j) in.v[j] = instr.v[j], in.v[dp + j] = h[j];
            Mat hid = affine(in, ev["edit.w1"], edit_mlp_width(dp), &ev["edit.b1"]);
            for (double& e : hid.v) e = gelu(e);
            edited = affine(hid, ev["edit.w2"], dp, &ev["edit.b2"]).v;
        }
        for (std::size_t j = 0; j < dp; ++j) {
            const double dj = edited[j] - h[j];
            loss.l1 += std::fabs(dj);
            loss.delta_sign.push_back(static_cast<signed char>((dj > 0) - (dj < 0)));
            x.at(spec.position, j) = edited[j];
        }
    };
    const Mat hidden = transformer(processor.config, pv, inputs, hook);
    const Mat logits = affine(hidden, pv["w_unembed"], processor.config.vocab_size, nullptr);

    double nll = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < logits.r; ++t) {
        if (!mask[t]) continue;
        double mx = logits.at(t, 0);
        for (std::size_t k = 1; k < logits.c; ++k) mx = std::max(mx, logits.at(t, k));
        double z = 0.0;
        for (std::size_t k = 0; k < logits.c; ++k) z += std::exp(logits.at(t, k) - mx);
        nll += mx + std::log(z) - logits.at(t, std::size_t(targets[t]));
        ++n;
    }
    if (n == 0) throw DegenerateInputError("reference: empty loss mask");
    loss.ce = nll / double(n);
    return loss;
}

}  // namespace edlab::reference
