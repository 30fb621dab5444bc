#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "edlab/data.hpp"
#include "edlab/intervene.hpp"
#include "edlab/model.hpp"
#include "edlab/train.hpp"

namespace edlab {

// A processor scored under one regime; editor runs also carry the editor.
struct System {
    Regime regime = Regime::ablated;
    const Processor* processor = nullptr;
    const Editor* editor = nullptr;
    EditSpec edit;
};

struct NllSum {
    double nll = 0.0;
    std::size_t tokens = 0;
};

// Sum over masked rows of -log softmax(logits[t])[targets[t]], natural log.
NllSum masked_nll(const Tensor& logits, std::span<const Token> targets, std::span<const std::uint8_t> mask);

// Negative log-likelihood of one instance's target tokens under the system.
NllSum instance_nll(const System& system, const Instance& inst);

struct PerplexityResult {
    double perplexity = 0.0;
    double nll = 0.0;
    std::size_t tokens = 0;
    std::size_t instances = 0;
    std::map<std::string, double> per_task;
};

// exp(total masked NLL / total masked tokens) over the whole split.
PerplexityResult evaluate_perplexity(const System& system, std::span<const Instance> split);
// Same over pre-built token sequences scored by a plain processor; works
// for any vocabulary, e.g. toy models without the byte specials.
PerplexityResult evaluate_perplexity(const Processor& processor, std::span<const Sequence> sequences);

// (ablated - editor) / (ablated - instruction_tuned); requires ablated > instruction_tuned.
double gap_closed(double ppl_ablated, double ppl_editor, double ppl_it);

struct LayerResult {
    std::size_t layer = 0;
    double eval_ppl = 0.0;
    std::optional<double> held_out_ppl;
    std::optional<double> gap_closed;
};

struct EvalReport {
    std::map<std::string, double> split_ppl;
    std::map<std::string, double> task_ppl;
    std::optional<double> gap_closed;
    std::vector<LayerResult> layers;
};

struct SweepInputs {
    const Processor* processor = nullptr;  // frozen
    ModelConfig editor_config;
    std::span<const Instance> train;
    std::span<const Instance> eval;
    std::span<const Instance> held_out;
    TrainConfig train_config;
    EditSpec edit;  // layer is overridden per entry
    std::optional<double> ppl_ablated;
    std::optional<double> ppl_it;
    // Per-layer training hooks (metrics, periodic checkpoints); the editor
    // reference stays valid for the whole training run.
    std::function<TrainHooks(std::size_t layer, const Editor&)> hooks_for;
    std::function<void(std::size_t layer, const Editor&, const TrainResult&)> on_trained;
};

// One editor per layer, identical data and seed; per-layer eval perplexity.
EvalReport layer_sweep(std::span<const std::size_t> layers, const SweepInputs& in);

struct SparsityReport {
    std::vector<double> mean_abs_delta;  // per dimension
    double mean_l1 = 0.0;                // mean over instances of sum_j |delta_j|
    double active_fraction = 0.0;        // share of (instance, dim) entries with |delta_j| > tau
    double tau = 0.0;
    std::vector<std::size_t> top_dims;   // by mean |delta|, descending
    std::size_t instances = 0;
};

inline constexpr std::size_t kMinSparsityInstances = 100;

// RMS of the unedited residual stream at the edit site over the split.
double edit_site_rms(const System& system, std::span<const Instance> split);
double default_tau(const System& system, std::span<const Instance> split);

SparsityReport sparsity_report(const System& system, std::span<const Instance> split, double tau,
                               std::size_t top_k = 8);

struct LocalityDiff {
    bool ok = true;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> row;
    std::string detail;
};

// Bitwise equality of every state before spec.layer and of every row other
// than spec.position at spec.layer.
LocalityDiff locality_check(const HiddenStates& edited, const HiddenStates& unedited, const EditSpec& spec);

}  // namespace edlab
