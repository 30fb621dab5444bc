#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "edlab/tensor.hpp"

namespace edlab {

// Byte-level vocabulary: ids 0-255 are raw bytes, then four specials.
namespace tok {
inline constexpr Token kBos = 256;
inline constexpr Token kSep = 257;
inline constexpr Token kEos = 258;
inline constexpr Token kPad = 259;
inline constexpr std::size_t kVocabSize = 260;
}  // namespace tok

std::vector<Token> tokenize(std::string_view text);
// Throws ContractError on special or out-of-range ids.
std::string detokenize(std::span<const Token> ids);

enum class Task { copy, reverse, shift1, shift2, upper, dup_first };

inline constexpr Task kAllTasks[] = {Task::copy,   Task::reverse, Task::shift1,
                                     Task::shift2, Task::upper,   Task::dup_first};

std::string task_name(Task t);
Task parse_task(std::string_view name);
std::vector<Task> parse_task_list(std::string_view comma_separated);

// The task's target function over lowercase input.
std::string apply_task(Task t, std::string_view input);

// Paraphrase templates, all kTemplateWidth bytes; the last one of each task
// is reserved for the held-out-instruction split.
inline constexpr std::size_t kTemplateWidth = 10;
std::span<const std::string_view> task_templates(Task t);
std::optional<Task> task_of_instruction(std::string_view instruction);

struct Instance {
    std::vector<Token> instruction;  // x_i
    std::vector<Token> input;        // x_d
    std::vector<Token> target;       // y
    std::optional<Task> task;
};

struct Dataset {
    std::vector<Instance> train;
    std::vector<Instance> eval;
    std::vector<Instance> held_out;  // instructions never seen in train
};

struct GenOptions {
    std::size_t n_eval = 0;      // 0 = n_train / 10
    std::size_t n_held_out = 0;  // 0 = n_train / 10
    std::size_t min_len = 3;
    std::size_t max_len = 12;
};

// Uniform task mix, targets computed by the task function, all instances
// distinct across splits. Deterministic in seed.
Dataset gen_dataset(std::span<const Task> tasks, std::size_t n_train, std::uint64_t seed, GenOptions options = {});

struct LoadResult {
    std::vector<Instance> instances;
    std::size_t skipped = 0;  // lines whose instruction-tuned layout exceeds max_seq
};

// JSON lines with "instruction", "input" (optional) and "output".
LoadResult load_alpaca_jsonl(const std::filesystem::path& path, std::size_t max_seq);
void write_jsonl(const std::filesystem::path& path, std::span<const Instance> instances);

// Deterministic split: an instance goes to eval when its FNV-1a hash
// falls in the lowest `eval_fraction` of the range.
Dataset split_by_hash(std::vector<Instance> instances, double eval_fraction = 0.1);
std::uint64_t instance_hash(const Instance& inst);

// Full token sequence with loss_mask[t] set when tokens[t + 1] is a
// target or EOS token, i.e. position t predicts part of y.
struct Sequence {
    std::vector<Token> tokens;
    Mask loss_mask;

    std::span<const Token> inputs() const { return {tokens.data(), tokens.size() - 1}; }
    std::span<const Token> targets() const { return {tokens.data() + 1, tokens.size() - 1}; }
    std::span<const std::uint8_t> mask() const { return {loss_mask.data(), loss_mask.size() - 1}; }
};

// BOS x_d SEP y EOS
Sequence layout_processor(std::span<const Token> input, std::span<const Token> target, std::size_t max_seq);
// BOS x_i SEP x_d SEP y EOS
Sequence layout_instruction_tuned(std::span<const Token> instruction, std::span<const Token> input,
                                  std::span<const Token> target, std::size_t max_seq);

}  // namespace edlab
