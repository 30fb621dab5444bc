#include "edlab/persist.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include <zlib.h>

#include "edlab/config.hpp"
#include "edlab/error.hpp"

namespace edlab {

namespace {

using Kind = CheckpointError::Kind;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
}

struct Entry {
    std::string name;
    const Tensor* tensor;
};

std::vector<Entry> manifest_of(const Checkpoint& c) {
    std::vector<Entry> entries;
    for (const auto& t : c.processor.params.tensors()) entries.push_back({"processor/" + t.name, &t.value});
    if (c.editor)
        for (const auto& t : c.editor->params.tensors()) entries.push_back({"editor/" + t.name, &t.value});
    const Params& trained = c.trained_params();
    const std::string owner = c.regime == Regime::editor ? "editor/" : "processor/";
    for (std::size_t i = 0; i < c.optimizer.m.size(); ++i)
        entries.push_back({"adam.m/" + owner + trained.tensors()[i].name, &c.optimizer.m[i]});
    for (std::size_t i = 0; i < c.optimizer.v.size(); ++i)
        entries.push_back({"adam.v/" + owner + trained.tensors()[i].name, &c.optimizer.v[i]});
    return entries;
}

json editor_json(const Editor& e) {
    json j = to_json(e.config);
    return {{"config", j}, {"out_width", e.out_width}, {"transform", e.transform}};
}

}  // namespace

const Params& Checkpoint::trained_params() const {
    if (regime == Regime::editor) {
        if (!editor) throw ContractError("editor checkpoint without an editor");
        return editor->params;
    }
    return processor.params;
}

std::uint32_t crc32_of(const void* data, std::size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    const Params& trained = c.trained_params();
    if (!c.optimizer.m.empty() && (c.optimizer.m.size() != trained.size() || c.optimizer.v.size() != trained.size()))
        throw ContractError("save_checkpoint: optimizer moments do not match the trained parameters");

    const auto entries = manifest_of(c);
    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        const std::uint64_t bytes = e.tensor->size() * 4;
        manifest.push_back({{"name", e.name}, {"shape", e.tensor->shape}, {"offset", offset}, {"bytes", bytes}});
        offset += bytes;
    }
    json header = {{"regime", to_string(c.regime)},
                   {"processor", to_json(c.processor.config)},
                   {"processor_frozen", c.processor.params.frozen},
                   {"editor", c.editor ? editor_json(*c.editor) : json(nullptr)},
                   {"edit", to_json(c.edit)},
                   {"train", to_json(c.train)},
                   {"optimizer_step", c.optimizer.step},
                   {"has_optimizer", !c.optimizer.m.empty()},
                   {"tensors", manifest}};
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> payload;
    payload.reserve(offset);
    for (const auto& e : entries)
        for (float v : e.tensor->data) put_u32(payload, std::bit_cast<std::uint32_t>(v));

    std::vector<std::uint8_t> out;
    out.reserve(16 + header_text.size() + payload.size() + 4);
    out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_u32(out, kCheckpointVersion);
    put_u64(out, header_text.size());
    out.insert(out.end(), header_text.begin(), header_text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32_of(payload.data(), payload.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(Kind::io, "cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(Kind::io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(Kind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = path.string() + ": ";

    if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
        throw CheckpointError(Kind::magic, where + "not an EDLB checkpoint (magic mismatch)");
    if (buf.size() < 16) throw CheckpointError(Kind::truncated, where + "truncated preamble");
    const std::uint32_t version = get_u32(buf.data() + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(Kind::version, where + "unsupported format version " + std::to_string(version));
    const std::uint64_t header_len = get_u64(buf.data() + 8);
    if (header_len > buf.size() - 16 || buf.size() - 16 - header_len < 4)
        throw CheckpointError(Kind::truncated, where + "truncated header or trailer");
    const std::uint8_t* payload = buf.data() + 16 + header_len;
    const std::size_t payload_size = buf.size() - 16 - header_len - 4;
    if (get_u32(payload + payload_size) != crc32_of(payload, payload_size))
        throw CheckpointError(Kind::crc, where + "payload CRC mismatch");

    json header;
    try {
        header = json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::parse_error& e) {
        throw CheckpointError(Kind::header, where + "bad header: " + e.what());
    }

    Checkpoint c;
    try {
        c.regime = parse_regime(header.at("regime").get<std::string>());
        c.processor = init_processor(model_config_from_json(header.at("processor"), "processor"), 0);
        c.processor.params.frozen = header.at("processor_frozen").get<bool>();
        if (const auto& e = header.at("editor"); !e.is_null())
            c.editor = init_editor(model_config_from_json(e.at("config"), "editor"), e.at("out_width").get<std::size_t>(),
                                   e.at("transform").get<bool>(), 0);
        c.edit = edit_spec_from_json(header.at("edit"));
        c.train = train_config_from_json(header.at("train"));
        if (header.at("has_optimizer").get<bool>()) {
            c.optimizer = OptimizerState::zeros_like(c.trained_params());
            c.optimizer.step = header.at("optimizer_step").get<std::uint64_t>();
        }
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::header, where + "bad header: " + e.what());
    }

    // Every expected tensor must appear exactly once and nothing else may.
    std::map<std::string, Tensor*> expected;
    for (auto& t : c.processor.params.tensors()) expected["processor/" + t.name] = &t.value;
    if (c.editor)
        for (auto& t : c.editor->params.tensors()) expected["editor/" + t.name] = &t.value;
    if (!c.optimizer.m.empty()) {
        const std::string owner = c.regime == Regime::editor ? "editor/" : "processor/";
        const auto& names = c.trained_params().tensors();
        for (std::size_t i = 0; i < names.size(); ++i) {
            expected["adam.m/" + owner + names[i].name] = &c.optimizer.m[i];
            expected["adam.v/" + owner + names[i].name] = &c.optimizer.v[i];
        }
    }

    const json& manifest = header.contains("tensors") ? header["tensors"] : json();
    if (!manifest.is_array()) throw CheckpointError(Kind::manifest, where + "manifest is not an array");
    std::uint64_t cursor = 0;
    for (const auto& m : manifest) {
        std::string name;
        Shape shape;
        std::uint64_t off = 0, bytes = 0;
        try {
            name = m.at("name").get<std::string>();
            shape = m.at("shape").get<Shape>();
            off = m.at("offset").get<std::uint64_t>();
            bytes = m.at("bytes").get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw CheckpointError(Kind::manifest, where + "bad manifest entry: " + e.what());
        }
        auto it = expected.find(name);
        if (it == expected.end()) throw CheckpointError(Kind::manifest, where + "unknown tensor '" + name + "'");
        Tensor& dst = *it->second;
        if (shape != dst.shape)
            throw CheckpointError(Kind::manifest, where + "tensor '" + name + "' has shape " + shape_str(shape) +
                                                      ", expected " + shape_str(dst.shape));
        if (off != cursor || bytes != dst.size() * 4 || off + bytes > payload_size)
            throw CheckpointError(Kind::manifest, where + "tensor '" + name + "' byte range does not tile the payload");
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] = std::bit_cast<float>(get_u32(payload + off + 4 * i));
        cursor += bytes;
        expected.erase(it);
    }
    if (!expected.empty())
        throw CheckpointError(Kind::manifest, where + "missing tensor '" + expected.begin()->first + "'");
    if (cursor != payload_size) throw CheckpointError(Kind::manifest, where + "payload has trailing bytes");
    return c;
}

}  // namespace edlab
