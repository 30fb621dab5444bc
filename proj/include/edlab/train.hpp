#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "edlab/data.hpp"
#include "edlab/intervene.hpp"
#include "edlab/model.hpp"

namespace edlab {

// editor: frozen processor edited by a trained editor; instruction_tuned:
// processor trained on (x_i, x_d) -> y; ablated: processor trained on x_d -> y.
enum class Regime { editor, instruction_tuned, ablated };

std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 32;
    std::size_t steps = 3000;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;  // global-norm clip; 0 disables
    std::size_t log_every = 50;
    std::size_t eval_every = 500;
    std::size_t eval_limit = 500;  // eval instances scored during training; 0 = all

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;

    static OptimizerState zeros_like(const Params& params);
};

// Adam with bias correction. A frozen parameter set is left untouched.
// Throws NumericError on a non-finite gradient.
void adam_step(Params& params, std::span<const Tensor> grads, OptimizerState& state, const TrainConfig& config);

// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

enum class Execution { serial, parallel };

struct BatchGradients {
    double loss = 0.0;     // mean total loss over the batch
    double ce = 0.0;       // mean cross-entropy
    double l1_mean = 0.0;  // mean sum |delta| at the edit site (editor runs)
    std::vector<Tensor> grads;  // aligned with the trained Params, averaged over the batch
};

// Per-instance graphs are independent; their gradients are summed in
// batch order, so serial and parallel execution agree bitwise.
BatchGradients editor_batch_gradients(const Processor& processor, const Editor& editor,
                                      std::span<const Instance* const> batch, const EditSpec& spec,
                                      Execution exec = Execution::parallel);
BatchGradients baseline_batch_gradients(const Processor& processor, std::span<const Instance* const> batch,
                                        Regime regime, Execution exec = Execution::parallel);

Sequence layout_for(Regime regime, const Instance& inst, std::size_t max_seq);

struct MetricsRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    std::optional<double> eval_ppl;
    double l1_mean = 0.0;
};

struct TrainHooks {
    std::function<void(const MetricsRecord&)> on_metrics;
    // Called after the optimizer update at every `checkpoint_every` step.
    std::function<void(std::size_t step, const OptimizerState&)> on_checkpoint;
    std::size_t checkpoint_every = 0;
};

struct TrainResult {
    std::vector<MetricsRecord> history;
    OptimizerState optimizer;
};

// Optimizes only the editor; the processor must be frozen and stays bitwise unchanged.
TrainResult train_editor(const Processor& processor, Editor& editor, std::span<const Instance> train,
                         std::span<const Instance> eval, const TrainConfig& config, const EditSpec& spec,
                         const TrainHooks& hooks = {});

// Trains every processor parameter under the instruction-tuned or ablated layout.
TrainResult train_baseline(Processor& processor, std::span<const Instance> train, std::span<const Instance> eval,
                           Regime regime, const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace edlab
