#pragma once

#include <optional>
#include <string>

#include "edlab/graph.hpp"
#include "edlab/model.hpp"

namespace edlab {

enum class EditMode { add, replace };

std::string to_string(EditMode mode);
EditMode parse_edit_mode(const std::string& s);

// Where and how the edit lands: residual stream after block `layer`
// (0 = post-embedding), row `position` of the processor input.
struct EditSpec {
    std::size_t layer = 0;
    std::size_t position = 0;
    EditMode mode = EditMode::add;
    double lambda_l1 = 0.0;

    void validate(const ModelConfig& processor) const;
    bool operator==(const EditSpec&) const = default;
};

// add: row p += edit; replace: row p = edit. Other rows are copied bitwise.
Tensor apply_edit(const Tensor& states_at_layer, const Tensor& edit, const EditSpec& spec);
Var apply_edit(Var states_at_layer, Var edit, const EditSpec& spec);

// Sum_j |h_edited_j - h_j|, sign subgradient with 0 at ties.
Var l1_penalty(Var h, Var h_edited);
float l1_penalty(const Tensor& h, const Tensor& h_edited);

struct EditedVars {
    Var logits;
    std::vector<Var> states;  // states[layer] is recorded after the edit
    Var h;                    // original row at the edit site
    Var h_edited;
    Var delta;                // h_edited - h; exactly the injected vector in add mode
};

// Processor forward pass over `sequence` with the editor's output spliced
// in at (spec.layer, spec.position). Processor parameters are bound as
// leaves, so gradients reach the editor through the processor graph
// without touching processor weights unless the caller asks for them.
EditedVars edited_forward(const BoundParams& processor, const ModelConfig& processor_config,
                          const BoundParams& editor, const Editor& editor_spec, std::span<const Token> instruction,
                          std::span<const Token> sequence, const EditSpec& spec);

// Same pass with an externally supplied edit vector in place of the editor.
EditedVars edited_forward_with(const BoundParams& processor, const ModelConfig& processor_config,
                               std::span<const Token> sequence, const EditSpec& spec,
                               const std::function<Var(Var h)>& make_edit);

struct EditedOutput {
    Tensor logits;
    HiddenStates states;
    Tensor delta;
};

EditedOutput edited_forward(const Processor& processor, const Editor& editor, std::span<const Token> instruction,
                            std::span<const Token> sequence, const EditSpec& spec);

}  // namespace edlab
