#include "edlab/config.hpp"

#include <fstream>
#include <set>

#include "edlab/error.hpp"

namespace edlab {

namespace {

class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!it->is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
                if (!it->is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError("");
            }
            out = it->get<T>();
        } catch (const std::exception&) {
            throw ConfigError(where_ + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.contains(it.key())) throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string, std::less<>> seen_;
};

}  // namespace

json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_seq", c.max_seq}};
}

json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"seed", c.seed},
            {"clip_norm", c.clip_norm},
            {"log_every", c.log_every},
            {"eval_every", c.eval_every},
            {"eval_limit", c.eval_limit}};
}

json to_json(const EditSpec& c) {
    return {{"layer", c.layer}, {"position", c.position}, {"mode", to_string(c.mode)}, {"lambda_l1", c.lambda_l1}};
}

json to_json(const DataConfig& c) {
    json tasks = json::array();
    for (Task t : c.tasks) tasks.push_back(task_name(t));
    return {{"train", c.train},       {"eval", c.eval},         {"held_out", c.held_out},
            {"n_train", c.n_train},   {"n_eval", c.n_eval},     {"n_held_out", c.n_held_out},
            {"seed", c.seed},         {"tasks", tasks},         {"min_len", c.min_len},
            {"max_len", c.max_len}};
}

json to_json(const RunConfig& c) {
    return {{"processor", to_json(c.processor)}, {"editor", to_json(c.editor)}, {"train", to_json(c.train)},
            {"edit", to_json(c.edit)},           {"data", to_json(c.data)},     {"processor_ckpt", c.processor_ckpt}};
}

ModelConfig model_config_from_json(const json& j, const std::string& where) {
    ModelConfig c;
    Reader r(j, where);
    r.get("vocab_size", c.vocab_size);
    r.get("d_model", c.d_model);
    r.get("n_layers", c.n_layers);
    r.get("n_heads", c.n_heads);
    r.get("d_ff", c.d_ff);
    r.get("max_seq", c.max_seq);
    r.finish();
    return c;
}

TrainConfig train_config_from_json(const json& j, const std::string& where) {
    TrainConfig c;
    Reader r(j, where);
    r.get("lr", c.lr);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("eps", c.eps);
    r.get("batch_size", c.batch_size);
    r.get("steps", c.steps);
    r.get("seed", c.seed);
    r.get("clip_norm", c.clip_norm);
    r.get("log_every", c.log_every);
    r.get("eval_every", c.eval_every);
    r.get("eval_limit", c.eval_limit);
    r.finish();
    return c;
}

EditSpec edit_spec_from_json(const json& j, const std::string& where) {
    EditSpec c;
    Reader r(j, where);
    r.get("layer", c.layer);
    r.get("position", c.position);
    std::string mode = to_string(c.mode);
    r.get("mode", mode);
    r.get("lambda_l1", c.lambda_l1);
    r.finish();
    try {
        c.mode = parse_edit_mode(mode);
    } catch (const ContractError& e) {
        throw ConfigError(where + ".mode: " + e.what());
    }
    return c;
}

DataConfig data_config_from_json(const json& j, const std::string& where) {
    DataConfig c;
    Reader r(j, where);
    r.get("train", c.train);
    r.get("eval", c.eval);
    r.get("held_out", c.held_out);
    r.get("n_train", c.n_train);
    r.get("n_eval", c.n_eval);
    r.get("n_held_out", c.n_held_out);
    r.get("seed", c.seed);
    r.get("min_len", c.min_len);
    r.get("max_len", c.max_len);
    if (const json* tasks = r.sub("tasks")) {
        if (!tasks->is_array()) throw ConfigError(where + ".tasks: expected an array of task names");
        c.tasks.clear();
        for (const auto& t : *tasks) {
            if (!t.is_string()) throw ConfigError(where + ".tasks: expected task names");
            try {
                c.tasks.push_back(parse_task(t.get<std::string>()));
            } catch (const ContractError& e) {
                throw ConfigError(where + ".tasks: " + e.what());
            }
        }
    }
    r.finish();
    return c;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Reader r(j, "config");
    if (const json* s = r.sub("processor")) c.processor = model_config_from_json(*s, "processor");
    if (const json* s = r.sub("editor")) c.editor = model_config_from_json(*s, "editor");
    if (const json* s = r.sub("train")) c.train = train_config_from_json(*s, "train");
    if (const json* s = r.sub("edit")) c.edit = edit_spec_from_json(*s, "edit");
    if (const json* s = r.sub("data")) c.data = data_config_from_json(*s, "data");
    r.get("processor_ckpt", c.processor_ckpt);
    r.finish();
    c.validate();
    return c;
}

void RunConfig::validate() const {
    auto wrap = [](const char* where, auto&& fn) {
        try {
            fn();
        } catch (const ContractError& e) {
            throw ConfigError(std::string(where) + ": " + e.what());
        }
    };
    wrap("processor", [&] { processor.validate(); });
    wrap("editor", [&] { editor.validate(); });
    wrap("train", [&] { train.validate(); });
    wrap("edit", [&] { edit.validate(processor); });
    if (processor.vocab_size != tok::kVocabSize || editor.vocab_size != tok::kVocabSize)
        throw ConfigError("vocab_size must be " + std::to_string(tok::kVocabSize) + " for the byte tokenizer");
    if (data.tasks.empty()) throw ConfigError("data.tasks: empty");
    if (data.min_len == 0 || data.min_len > data.max_len) throw ConfigError("data: bad length range");
    if (data.train.empty() && data.n_train == 0) throw ConfigError("data.n_train must be >= 1");
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace edlab
