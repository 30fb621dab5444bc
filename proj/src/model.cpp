#include "edlab/model.hpp"

#include <cmath>
#include <algorithm>
#include <cstring>
#include <random>
#include <string>

#include "edlab/error.hpp"

namespace edlab {

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0)
        throw ContractError("model config: all extents must be >= 1");
    if (d_model % n_heads != 0)
        throw ContractError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
}

void Params::add(std::string name, Tensor value) {
    if (lookup_.contains(name)) throw ContractError("duplicate parameter name: " + name);
    lookup_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), std::move(value)});
}

std::size_t Params::index(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end()) throw ContractError("unknown parameter: " + std::string(name));
    return it->second;
}

bool Params::contains(std::string_view name) const { return lookup_.contains(std::string(name)); }

std::size_t Params::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
}

bool Params::bitwise_equal(const Params& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
        if (tensors_[i].name != other.tensors_[i].name || !tensors_[i].value.bitwise_equal(other.tensors_[i].value))
            return false;
    return true;
}

BoundParams::BoundParams(Graph& g, const Params& params) : params_(&params) {
    vars_.reserve(params.size());
    for (const auto& t : params.tensors()) vars_.push_back(g.param(t.value));
}

namespace {

std::string block(std::size_t i, const char* leaf) { return "h" + std::to_string(i) + "." + leaf; }

class ParamBuilder {
public:
    explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

    void gaussian(Params& p, std::string name, Shape shape, float sd) {
        Tensor t(std::move(shape));
        std::normal_distribution<float> dist(0.0f, sd);
        for (float& v : t.data) v = dist(rng_);
        p.add(std::move(name), std::move(t));
    }
    void zeros(Params& p, std::string name, Shape shape) { p.add(std::move(name), Tensor(std::move(shape))); }
    void ones(Params& p, std::string name, Shape shape) {
        p.add(std::move(name), Tensor::filled(std::move(shape), 1.0f));
    }

    std::mt19937_64& rng() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// Body weights use 1/sqrt(d_model); at 0.02 (GPT-2's value for d=768) a
// d=64 model starts with near-uniform attention and sits on a long plateau.
// Output heads stay at 0.02 so initial predictions and edits are small.
constexpr float kHeadStd = 0.02f;

void add_transformer(ParamBuilder& b, Params& p, const ModelConfig& c, bool with_unembedding) {
    const std::size_t d = c.d_model;
    const float sd = 1.0f / std::sqrt(static_cast<float>(d));
    b.gaussian(p, "wte", {c.vocab_size, d}, sd);
    b.gaussian(p, "wpe", {c.max_seq, d}, sd);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        b.ones(p, block(i, "ln1.g"), {d});
        b.zeros(p, block(i, "ln1.b"), {d});
        b.gaussian(p, block(i, "attn.w_qkv"), {d, 3 * d}, sd);
        b.zeros(p, block(i, "attn.b_qkv"), {3 * d});
        b.gaussian(p, block(i, "attn.w_o"), {d, d}, sd);
        b.zeros(p, block(i, "attn.b_o"), {d});
        b.ones(p, block(i, "ln2.g"), {d});
        b.zeros(p, block(i, "ln2.b"), {d});
        b.gaussian(p, block(i, "mlp.w_in"), {d, c.d_ff}, sd);
        b.zeros(p, block(i, "mlp.b_in"), {c.d_ff});
        b.gaussian(p, block(i, "mlp.w_out"), {c.d_ff, d}, sd);
        b.zeros(p, block(i, "mlp.b_out"), {d});
    }
    b.ones(p, "ln_f.g", {d});
    b.zeros(p, "ln_f.b", {d});
    if (with_unembedding) b.gaussian(p, "w_unembed", {d, c.vocab_size}, kHeadStd);
}

}  // namespace

Params init_transformer_params(const ModelConfig& config, std::uint64_t seed, bool with_unembedding) {
    config.validate();
    ParamBuilder b(seed);
    Params p;
    add_transformer(b, p, config, with_unembedding);
    return p;
}

Processor init_processor(const ModelConfig& config, std::uint64_t seed) {
    return {config, init_transformer_params(config, seed, true)};
}

std::size_t edit_mlp_width(std::size_t out_width) { return 2 * out_width; }

Editor init_editor(const ModelConfig& config, std::size_t out_width, bool transform, std::uint64_t seed) {
    config.validate();
    if (out_width == 0) throw ContractError("editor output width must be >= 1");
    ParamBuilder b(seed);
    Editor e{config, out_width, transform, {}};
    add_transformer(b, e.params, config, false);
    b.gaussian(e.params, "proj", {config.d_model, out_width}, kHeadStd);
    if (transform) {
        const std::size_t hidden = edit_mlp_width(out_width);
        b.gaussian(e.params, "edit.w1", {2 * out_width, hidden}, kHeadStd);
        b.zeros(e.params, "edit.b1", {hidden});
        b.gaussian(e.params, "edit.w2", {hidden, out_width}, kHeadStd);
        b.zeros(e.params, "edit.b2", {out_width});
    }
    return e;
}

ForwardVars transformer_forward(const BoundParams& p, const ModelConfig& c, std::span<const Token> tokens,
                                const StateHook& hook, bool unembed) {
    if (tokens.empty()) throw DegenerateInputError("transformer_forward: empty token sequence");
    if (tokens.size() > c.max_seq)
        throw ContractError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                            std::to_string(c.max_seq));
    const std::size_t T = tokens.size();
    ForwardVars out;
    out.states.reserve(c.n_layers + 1);

    Var x = add(embedding_lookup(p["wte"], tokens), slice_rows(p["wpe"], 0, T));
    if (hook) x = hook(0, x);
    out.states.push_back(x);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        Var a = layer_norm(x, p[block(i, "ln1.g")], p[block(i, "ln1.b")]);
        Var qkv = add_bias(matmul(a, p[block(i, "attn.w_qkv")]), p[block(i, "attn.b_qkv")]);
        Var att = causal_self_attention(qkv, c.n_heads);
        x = add(x, add_bias(matmul(att, p[block(i, "attn.w_o")]), p[block(i, "attn.b_o")]));
        Var m = layer_norm(x, p[block(i, "ln2.g")], p[block(i, "ln2.b")]);
        Var hid = gelu(add_bias(matmul(m, p[block(i, "mlp.w_in")]), p[block(i, "mlp.b_in")]));
        x = add(x, add_bias(matmul(hid, p[block(i, "mlp.w_out")]), p[block(i, "mlp.b_out")]));
        if (hook) x = hook(i + 1, x);
        out.states.push_back(x);
    }
    out.final_hidden = layer_norm(x, p["ln_f.g"], p["ln_f.b"]);
    if (unembed) out.logits = matmul(out.final_hidden, p["w_unembed"]);
    return out;
}

ProcessorOutput processor_forward(const Processor& processor, std::span<const Token> tokens) {
    Graph g;
    BoundParams p(g, processor.params);
    ForwardVars fw = transformer_forward(p, processor.config, tokens);
    ProcessorOutput out;
    out.logits = fw.logits.value();
    for (Var s : fw.states) out.states.layers.push_back(s.value());
    return out;
}

Var editor_encode(const BoundParams& editor, const Editor& spec, std::span<const Token> instruction) {
    if (instruction.empty()) throw DegenerateInputError("editor_encode: empty instruction");
    ForwardVars fw = transformer_forward(editor, spec.config, instruction, {}, false);
    Var last = slice_rows(fw.final_hidden, instruction.size() - 1, 1);
    return reshape(matmul(last, editor["proj"]), {spec.out_width});
}

Tensor editor_encode(const Editor& editor, std::span<const Token> instruction) {
    Graph g;
    BoundParams p(g, editor.params);
    return editor_encode(p, editor, instruction).value();
}

Var editor_transform(const BoundParams& editor, const Editor& spec, Var instr_vec, Var h) {
    if (!spec.transform) throw ContractError("editor_transform: editor has no transform MLP");
    const Shape want{spec.out_width};
    if (instr_vec.shape() != want || h.shape() != want)
        throw DimensionError("editor_transform: inputs " + shape_str(instr_vec.shape()) + ", " +
                             shape_str(h.shape()) + " for width " + std::to_string(spec.out_width));
    Var in = reshape(concat(instr_vec, h), {1, 2 * spec.out_width});
    Var hid = gelu(add_bias(matmul(in, editor["edit.w1"]), editor["edit.b1"]));
    Var out = add_bias(matmul(hid, editor["edit.w2"]), editor["edit.b2"]);
    return reshape(out, want);
}

std::vector<Token> greedy_decode(const Processor& processor, std::vector<Token> prefix, std::size_t max_new,
                                 Token stop) {
    std::vector<Token> produced;
    for (std::size_t i = 0; i < max_new && prefix.size() < processor.config.max_seq; ++i) {
        const Tensor logits = processor_forward(processor, prefix).logits;
        const auto last = logits.row(logits.rows() - 1);
        const auto best = static_cast<Token>(std::max_element(last.begin(), last.end()) - last.begin());
        produced.push_back(best);
        if (best == stop) break;
        prefix.push_back(best);
    }
    return produced;
}

}  // namespace edlab
