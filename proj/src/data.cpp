#include "edlab/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iostream>
#include <random>
#include <unordered_set>

#include "json.hpp"

#include "edlab/error.hpp"

namespace edlab {

std::vector<Token> tokenize(std::string_view text) {
    std::vector<Token> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<Token>(static_cast<unsigned char>(c)));
    return ids;
}

std::string detokenize(std::span<const Token> ids) {
    std::string s;
    s.reserve(ids.size());
    for (Token t : ids) {
        if (t < 0 || t > 255) throw ContractError("detokenize: id " + std::to_string(t) + " is not a byte");
        s.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return s;
}

// ---- tasks ---------------------------------------------------------------

namespace {

// Every paraphrase is exactly kTemplateWidth bytes, so x_d sits at a fixed
// offset in the instruction-tuned layout. With variable-length instructions
// the desk-scale model (learned absolute positions) spends its whole budget
// locating x_d and never gets near the ablated baseline.
constexpr std::array<std::string_view, 5> kCopy = {"copy input", "repeat all", "echo input", "same again", "keep as is"};
constexpr std::array<std::string_view, 5> kReverse = {"reverse it", "flip order", "backwards.", "mirror all", "last first"};
constexpr std::array<std::string_view, 5> kShift1 = {"shift by 1", "advance 1.", "next chars", "step up 1.", "+1 letters"};
constexpr std::array<std::string_view, 5> kShift2 = {"shift by 2", "advance 2.", "skip ahead", "step up 2.", "+2 letters"};
constexpr std::array<std::string_view, 5> kUpper = {"uppercase.", "capitalize", "upper case", "make caps.", "all capped"};
constexpr std::array<std::string_view, 5> kDupFirst = {"double 1st", "stutter it", "repeat 1st", "dup first.", "echo first"};

char shift_letter(char c, int k) {
    if (c < 'a' || c > 'z') return c;
    return static_cast<char>('a' + (c - 'a' + k) % 26);
}

}  // namespace

std::string task_name(Task t) {
    switch (t) {
        case Task::copy: return "copy";
        case Task::reverse: return "reverse";
        case Task::shift1: return "shift1";
        case Task::shift2: return "shift2";
        case Task::upper: return "upper";
        case Task::dup_first: return "dup-first";
    }
    return "?";
}

Task parse_task(std::string_view name) {
    for (Task t : kAllTasks)
        if (task_name(t) == name) return t;
    throw ContractError("unknown task '" + std::string(name) + "'");
}

std::vector<Task> parse_task_list(std::string_view list) {
    std::vector<Task> tasks;
    std::size_t start = 0;
    while (start <= list.size()) {
        const auto end = std::min(list.find(',', start), list.size());
        if (end > start) tasks.push_back(parse_task(list.substr(start, end - start)));
        start = end + 1;
    }
    if (tasks.empty()) throw ContractError("empty task list");
    return tasks;
}

std::string apply_task(Task t, std::string_view input) {
    std::string s(input);
    switch (t) {
        case Task::copy: break;
        case Task::reverse: std::reverse(s.begin(), s.end()); break;
        case Task::shift1:
            for (char& c : s) c = shift_letter(c, 1);
            break;
        case Task::shift2:
            for (char& c : s) c = shift_letter(c, 2);
            break;
        case Task::upper:
            for (char& c : s)
                if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
            break;
        case Task::dup_first:
            if (!s.empty()) s.insert(s.begin(), s.front());
            break;
    }
    return s;
}

std::span<const std::string_view> task_templates(Task t) {
    switch (t) {
        case Task::copy: return kCopy;
        case Task::reverse: return kReverse;
        case Task::shift1: return kShift1;
        case Task::shift2: return kShift2;
        case Task::upper: return kUpper;
        case Task::dup_first: return kDupFirst;
    }
    return {};
}

std::optional<Task> task_of_instruction(std::string_view instruction) {
    for (Task t : kAllTasks)
        for (auto tpl : task_templates(t))
            if (tpl == instruction) return t;
    return std::nullopt;
}

// ---- generation ----------------------------------------------------------

Dataset gen_dataset(std::span<const Task> tasks, std::size_t n_train, std::uint64_t seed, GenOptions opt) {
    if (n_train == 0) throw ContractError("gen_dataset: n must be >= 1");
    if (tasks.empty()) throw ContractError("gen_dataset: no tasks");
    if (opt.min_len == 0 || opt.min_len > opt.max_len) throw ContractError("gen_dataset: bad length range");
    const std::size_t n_eval = opt.n_eval ? opt.n_eval : std::max<std::size_t>(1, n_train / 10);
    const std::size_t n_held = opt.n_held_out ? opt.n_held_out : std::max<std::size_t>(1, n_train / 10);

    std::mt19937_64 rng(seed);
    std::unordered_set<std::string> seen;
    std::uniform_int_distribution<std::size_t> len_dist(opt.min_len, opt.max_len);
    std::uniform_int_distribution<int> letter('a', 'z');

    auto make_split = [&](std::size_t n, bool held_out) {
        std::vector<Instance> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Task task = tasks[i % tasks.size()];
            const auto templates = task_templates(task);
            std::string_view tpl;
            if (held_out) {
                tpl = templates.back();
            } else {
                std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 2);
                tpl = templates[pick(rng)];
            }
            std::string input;
            do {
                input.resize(len_dist(rng));
                for (char& c : input) c = static_cast<char>(letter(rng));
            } while (!seen.insert(std::string(tpl) + '\n' + input).second);
            out.push_back({tokenize(tpl), tokenize(input), tokenize(apply_task(task, input)), task});
        }
        std::shuffle(out.begin(), out.end(), rng);
        return out;
    };

    Dataset ds;
    ds.train = make_split(n_train, false);
    ds.eval = make_split(n_eval, false);
    ds.held_out = make_split(n_held, true);
    return ds;
}

// ---- JSONL ---------------------------------------------------------------

LoadResult load_alpaca_jsonl(const std::filesystem::path& path, std::size_t max_seq) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    LoadResult result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path.string() + ": malformed JSON: " + e.what(), lineno);
        }
        if (!j.is_object()) throw ParseError(path.string() + ": expected a JSON object", lineno);
        auto field = [&](const char* key, bool required) -> std::string {
            auto it = j.find(key);
            if (it == j.end()) {
                if (required) throw ParseError(path.string() + ": missing field \"" + key + "\"", lineno);
                return {};
            }
            if (!it->is_string()) throw ParseError(path.string() + ": field \"" + key + "\" is not a string", lineno);
            return it->get<std::string>();
        };
        const std::string instruction = field("instruction", true);
        const std::string input = field("input", false);
        const std::string output = field("output", true);
        if (output.empty()) throw ParseError(path.string() + ": empty \"output\"", lineno);
        // Longest layout is BOS x_i SEP x_d SEP y EOS.
        if (instruction.size() + input.size() + output.size() + 4 > max_seq) {
            ++result.skipped;
            continue;
        }
        result.instances.push_back(
            {tokenize(instruction), tokenize(input), tokenize(output), task_of_instruction(instruction)});
    }
    if (result.skipped)
        std::cerr << "warning: " << path.string() << ": skipped " << result.skipped << " line(s) longer than max_seq "
                  << max_seq << "\n";
    return result;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Instance> instances) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& inst : instances) {
        nlohmann::ordered_json j;
        j["instruction"] = detokenize(inst.instruction);
        j["input"] = detokenize(inst.input);
        j["output"] = detokenize(inst.target);
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::uint64_t instance_hash(const Instance& inst) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::span<const Token> ids) {
        for (Token t : ids) {
            h ^= static_cast<std::uint64_t>(t);
            h *= 1099511628211ull;
        }
        h ^= 0xffu;  // field separator
        h *= 1099511628211ull;
    };
    mix(inst.instruction);
    mix(inst.input);
    mix(inst.target);
    return h;
}

Dataset split_by_hash(std::vector<Instance> instances, double eval_fraction) {
    if (!(eval_fraction >= 0.0 && eval_fraction <= 1.0)) throw ContractError("eval fraction outside [0, 1]");
    Dataset ds;
    const auto cut = static_cast<std::uint64_t>(eval_fraction * 18446744073709551615.0);
    for (auto& inst : instances) (instance_hash(inst) < cut ? ds.eval : ds.train).push_back(std::move(inst));
    return ds;
}

// ---- layouts -------------------------------------------------------------

namespace {

Sequence finish_layout(std::vector<Token> tokens, std::size_t target_start, std::size_t max_seq) {
    if (tokens.size() > max_seq)
        throw ContractError("layout of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                            std::to_string(max_seq));
    Sequence s;
    s.loss_mask.assign(tokens.size(), 0);
    for (std::size_t t = target_start; t < tokens.size(); ++t) s.loss_mask[t - 1] = 1;
    s.tokens = std::move(tokens);
    return s;
}

}  // namespace

Sequence layout_processor(std::span<const Token> input, std::span<const Token> target, std::size_t max_seq) {
    if (target.empty()) throw ContractError("layout: empty target");
    std::vector<Token> t;
    t.reserve(input.size() + target.size() + 3);
    t.push_back(tok::kBos);
    t.insert(t.end(), input.begin(), input.end());
    t.push_back(tok::kSep);
    const std::size_t start = t.size();
    t.insert(t.end(), target.begin(), target.end());
    t.push_back(tok::kEos);
    return finish_layout(std::move(t), start, max_seq);
}

Sequence layout_instruction_tuned(std::span<const Token> instruction, std::span<const Token> input,
                                  std::span<const Token> target, std::size_t max_seq) {
    if (target.empty()) throw ContractError("layout: empty target");
    std::vector<Token> t;
    t.reserve(instruction.size() + input.size() + target.size() + 4);
    t.push_back(tok::kBos);
    t.insert(t.end(), instruction.begin(), instruction.end());
    t.push_back(tok::kSep);
    t.insert(t.end(), input.begin(), input.end());
    t.push_back(tok::kSep);
    const std::size_t start = t.size();
    t.insert(t.end(), target.begin(), target.end());
    t.push_back(tok::kEos);
    return finish_layout(std::move(t), start, max_seq);
}

}  // namespace edlab
