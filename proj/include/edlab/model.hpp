#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "edlab/graph.hpp"
#include "edlab/tensor.hpp"

namespace edlab {

struct ModelConfig {
    std::size_t vocab_size = 260;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq = 64;

    // Throws ContractError on zero extents or d_model % n_heads != 0.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;

    static ModelConfig processor_default() { return {}; }
    static ModelConfig editor_default() { return {260, 32, 2, 2, 128, 64}; }
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Ordered, uniquely named parameter tensors. A frozen set is never touched
// by an optimizer.
class Params {
public:
    void add(std::string name, Tensor value);

    std::size_t size() const { return tensors_.size(); }
    std::size_t index(std::string_view name) const;  // throws ContractError when absent
    bool contains(std::string_view name) const;

    Tensor& at(std::string_view name) { return tensors_[index(name)].value; }
    const Tensor& at(std::string_view name) const { return tensors_[index(name)].value; }

    std::vector<NamedTensor>& tensors() { return tensors_; }
    const std::vector<NamedTensor>& tensors() const { return tensors_; }

    std::size_t scalar_count() const;
    bool bitwise_equal(const Params& other) const;

    bool frozen = false;

private:
    std::vector<NamedTensor> tensors_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

// Parameters recorded as leaves on one Graph.
class BoundParams {
public:
    BoundParams(Graph& g, const Params& params);
    Var operator[](std::string_view name) const { return vars_[params_->index(name)]; }
    const std::vector<Var>& vars() const { return vars_; }

private:
    const Params* params_;
    std::vector<Var> vars_;
};

// Residual stream per layer: index 0 is post-embedding, index l is the output of block l.
struct HiddenStates {
    std::vector<Tensor> layers;
};

struct Processor {
    ModelConfig config;
    Params params;
};

// Small transformer that reads an instruction, plus a projection from its
// width to the processor width. `transform` adds the two-layer MLP used to
// form a replacement hidden state from (instruction vector, h).
struct Editor {
    ModelConfig config;
    std::size_t out_width = 64;
    bool transform = false;
    Params params;
};

// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains; deterministic in seed.
Params init_transformer_params(const ModelConfig& config, std::uint64_t seed, bool with_unembedding);
Processor init_processor(const ModelConfig& config, std::uint64_t seed);
Editor init_editor(const ModelConfig& config, std::size_t out_width, bool transform, std::uint64_t seed);

std::size_t edit_mlp_width(std::size_t out_width);

// Called with each residual-stream state as it is produced; the returned
// Var replaces it for the rest of the forward pass.
using StateHook = std::function<Var(std::size_t layer, Var state)>;

struct ForwardVars {
    Var logits;               // [T x V], invalid when the model has no unembedding
    Var final_hidden;         // [T x d] after the final layer norm
    std::vector<Var> states;  // n_layers + 1 entries
};

// Pre-norm causal transformer over `tokens`.
ForwardVars transformer_forward(const BoundParams& params, const ModelConfig& config, std::span<const Token> tokens,
                                const StateHook& hook = {}, bool unembed = true);

struct ProcessorOutput {
    Tensor logits;
    HiddenStates states;
};

ProcessorOutput processor_forward(const Processor& processor, std::span<const Token> tokens);

// Last-token hidden state of the editor transformer projected to the processor width: [out_width].
Var editor_encode(const BoundParams& editor, const Editor& spec, std::span<const Token> instruction);
Tensor editor_encode(const Editor& editor, std::span<const Token> instruction);

// Two-layer GELU MLP over [instr_vec; h] producing a replacement hidden state.
Var editor_transform(const BoundParams& editor, const Editor& spec, Var instr_vec, Var h);

// Greedy continuation; ties go to the lowest token id.
std::vector<Token> greedy_decode(const Processor& processor, std::vector<Token> prefix, std::size_t max_new,
                                 Token stop);

}  // namespace edlab
