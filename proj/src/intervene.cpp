#include "edlab/intervene.hpp"

#include <cmath>

#include "edlab/error.hpp"

namespace edlab {

std::string to_string(EditMode mode) { return mode == EditMode::add ? "add" : "replace"; }

EditMode parse_edit_mode(const std::string& s) {
    if (s == "add") return EditMode::add;
    if (s == "replace") return EditMode::replace;
    throw ContractError("unknown edit mode '" + s + "' (expected add|replace)");
}

void EditSpec::validate(const ModelConfig& processor) const {
    if (layer > processor.n_layers)
        throw ContractError("edit layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(processor.n_layers) + "]");
    if (position >= processor.max_seq)
        throw ContractError("edit position " + std::to_string(position) + " beyond max_seq");
    if (!(lambda_l1 >= 0.0) || !std::isfinite(lambda_l1)) throw ContractError("lambda_l1 must be finite and >= 0");
}

namespace {

void check_edit_site(const Tensor& states, const Tensor& edit, const EditSpec& spec) {
    if (spec.position >= states.rows())
        throw ContractError("edit position " + std::to_string(spec.position) + " outside sequence of " +
                            std::to_string(states.rows()));
    if (edit.size() != states.cols())
        throw DimensionError("edit vector " + shape_str(edit.shape) + " for states " + shape_str(states.shape));
}

}  // namespace

Tensor apply_edit(const Tensor& states_at_layer, const Tensor& edit, const EditSpec& spec) {
    check_edit_site(states_at_layer, edit, spec);
    Tensor out = states_at_layer;
    auto r = out.row(spec.position);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = spec.mode == EditMode::add ? r[j] + edit.data[j] : edit.data[j];
    return out;
}

Var apply_edit(Var states_at_layer, Var edit, const EditSpec& spec) {
    check_edit_site(states_at_layer.value(), edit.value(), spec);
    if (spec.mode == EditMode::replace) return with_row(states_at_layer, spec.position, edit);
    return with_row(states_at_layer, spec.position, add(row(states_at_layer, spec.position), edit));
}

Var l1_penalty(Var h, Var h_edited) {
    if (h.shape() != h_edited.shape())
        throw DimensionError("l1_penalty: " + shape_str(h.shape()) + " vs " + shape_str(h_edited.shape()));
    return sum(abs(sub(h_edited, h)));
}

float l1_penalty(const Tensor& h, const Tensor& h_edited) {
    if (h.shape != h_edited.shape)
        throw DimensionError("l1_penalty: " + shape_str(h.shape) + " vs " + shape_str(h_edited.shape));
    double acc = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) acc += std::fabs(h_edited.data[i] - h.data[i]);
    return static_cast<float>(acc);
}

EditedVars edited_forward_with(const BoundParams& processor, const ModelConfig& processor_config,
                               std::span<const Token> sequence, const EditSpec& spec,
                               const std::function<Var(Var h)>& make_edit) {
    spec.validate(processor_config);
    if (spec.position >= sequence.size())
        throw ContractError("edit position " + std::to_string(spec.position) + " outside sequence of " +
                            std::to_string(sequence.size()));
    EditedVars out;
    StateHook hook = [&](std::size_t layer, Var state) {
        if (layer != spec.layer) return state;
        out.h = row(state, spec.position);
        Var edit = make_edit(out.h);
        Var edited = apply_edit(state, edit, spec);
        out.h_edited = row(edited, spec.position);
        out.delta = spec.mode == EditMode::add ? edit : sub(out.h_edited, out.h);
        return edited;
    };
    ForwardVars fw = transformer_forward(processor, processor_config, sequence, hook);
    out.logits = fw.logits;
    out.states = std::move(fw.states);
    return out;
}

EditedVars edited_forward(const BoundParams& processor, const ModelConfig& processor_config,
                          const BoundParams& editor, const Editor& editor_spec, std::span<const Token> instruction,
                          std::span<const Token> sequence, const EditSpec& spec) {
    if (editor_spec.out_width != processor_config.d_model)
        throw DimensionError("editor output width " + std::to_string(editor_spec.out_width) +
                             " != processor width " + std::to_string(processor_config.d_model));
    if (spec.mode == EditMode::replace && !editor_spec.transform)
        throw ContractError("replace-mode edits need an editor with a transform MLP");
    // The instruction is encoded before the processor graph so node order
    // stays independent of the edit layer.
    Var instr_vec = editor_encode(editor, editor_spec, instruction);
    return edited_forward_with(processor, processor_config, sequence, spec, [&](Var h) {
        return spec.mode == EditMode::add ? instr_vec : editor_transform(editor, editor_spec, instr_vec, h);
    });
}

EditedOutput edited_forward(const Processor& processor, const Editor& editor, std::span<const Token> instruction,
                            std::span<const Token> sequence, const EditSpec& spec) {
    Graph g;
    BoundParams pp(g, processor.params);
    BoundParams ep(g, editor.params);
    EditedVars v = edited_forward(pp, processor.config, ep, editor, instruction, sequence, spec);
    EditedOutput out;
    out.logits = v.logits.value();
    for (Var s : v.states) out.states.layers.push_back(s.value());
    out.delta = v.delta.value();
    return out;
}

}  // namespace edlab
