#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elcbert/encoder.hpp"
#include "elcbert/error.hpp"

namespace elcbert {

// Checkpoint file layout, all integers little-endian:
//   bytes 0..3    magic "ELCB"
//   bytes 4..7    u32 format version
//   bytes 8..15   u64 JSON header length
//   header        UTF-8 JSON: config, train_state, vocab, tensor table
//   payload       raw little-endian f64 tensor data, at the table's offsets
// Tensor offsets are relative to the start of the payload section.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'E', 'L', 'C', 'B'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload I/O assumes a little-endian host");

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    EncoderConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> vocab_tokens;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) {
                return &t;
            }
        }
        return nullptr;
    }
};

// --- config (de)serialization ---

inline nlohmann::json wiring_to_json(const WiringMode& w) {
    return {{"scheme", w.scheme == WiringScheme::kElc ? "elc" : "standard-residual"},
            {"init", w.init == InitScheme::kZero ? "zero" : "biased"},
            {"mlp_residual", w.mlp_residual},
            {"normalize_outputs", w.normalize_outputs},
            {"weighted_output", w.weighted_output}};
}

inline WiringMode wiring_from_json(const nlohmann::json& j) {
    WiringMode w;
    const std::string scheme = j.at("scheme").get<std::string>();
    if (scheme == "elc") {
        w.scheme = WiringScheme::kElc;
    } else if (scheme == "standard-residual") {
        w.scheme = WiringScheme::kStandardResidual;
    } else {
        throw ConfigError("wiring: unknown scheme '" + scheme + "'");
    }
    const std::string init = j.at("init").get<std::string>();
    if (init == "zero") {
        w.init = InitScheme::kZero;
    } else if (init == "biased") {
        w.init = InitScheme::kBiased;
    } else {
        throw ConfigError("wiring: unknown init '" + init + "'");
    }
    w.mlp_residual = j.at("mlp_residual").get<bool>();
    w.normalize_outputs = j.at("normalize_outputs").get<bool>();
    w.weighted_output = j.at("weighted_output").get<bool>();
    return w;
}

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
    return {{"num_layers", c.num_layers},
            {"hidden_size", c.hidden_size},
            {"num_heads", c.num_heads},
            {"ff_size", c.ff_size},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"wiring", wiring_to_json(c.wiring)},
            {"dropout", c.dropout},
            {"layer_norm_eps", c.layer_norm_eps},
            {"mix_eps", c.mix_eps}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ff_size = j.at("ff_size").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.wiring = wiring_from_json(j.at("wiring"));
    c.dropout = j.at("dropout").get<double>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.mix_eps = j.at("mix_eps").get<double>();
    return c;
}

// --- file I/O ---

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        const std::uint64_t bytes = tensor.numel() * sizeof(double);
        table.push_back({{"name", name},
                         {"shape", tensor.shape()},
                         {"offset", offset},
                         {"length", bytes}});
        offset += bytes;
    }
    nlohmann::json header = {{"config", encoder_config_to_json(ckpt.config)},
                             {"train_state", {{"step", ckpt.step}, {"seed", ckpt.seed}}},
                             {"vocab", ckpt.vocab_tokens},
                             {"tensors", table}};
    const std::string header_bytes = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoFailure("cannot write '" + path + "'");
    }
    os.write(kCheckpointMagic, 4);
    const std::uint32_t version = ckpt.version;
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header_bytes.size();
    os.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    os.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        os.write(reinterpret_cast<const char*>(tensor.data().data()),
                 static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!os.flush()) {
        throw IoFailure("write failed on '" + path + "'");
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoFailure("cannot open '" + path + "'");
    }
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (is.bad()) {
        throw IoFailure("read failed on '" + path + "'");
    }
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CorruptCheckpoint("'" + path + "': bad magic");
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof(version));
    if (version != kCheckpointVersion) {
        throw VersionMismatch("'" + path + "': format version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 8, sizeof(header_len));
    const std::uint64_t payload_base = 16 + header_len;
    if (payload_base > bytes.size()) {
        throw CorruptCheckpoint("'" + path + "': truncated header");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16,
                                       bytes.begin() + static_cast<std::ptrdiff_t>(payload_base));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("'" + path + "': unparseable header: " + e.what());
    }

    Checkpoint ckpt;
    ckpt.version = version;
    try {
        ckpt.config = encoder_config_from_json(header.at("config"));
        ckpt.step = header.at("train_state").at("step").get<std::uint64_t>();
        ckpt.seed = header.at("train_state").at("seed").get<std::uint64_t>();
        ckpt.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();

        std::uint64_t expected_end = 0;
        for (const nlohmann::json& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
            const std::uint64_t length = entry.at("length").get<std::uint64_t>();
            if (length != shape_numel(shape) * sizeof(double)) {
                throw CorruptCheckpoint("'" + path + "': tensor '" + name +
                                        "' length disagrees with its shape");
            }
            if (payload_base + offset + length > bytes.size()) {
                throw CorruptCheckpoint("'" + path + "': tensor '" + name +
                                        "' extends past end of file");
            }
            std::vector<double> data(shape_numel(shape));
            std::memcpy(data.data(), bytes.data() + payload_base + offset, length);
            ckpt.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
            expected_end = std::max(expected_end, payload_base + offset + length);
        }
        if (expected_end != bytes.size() && !(header.at("tensors").empty() &&
                                              payload_base == bytes.size())) {
            throw CorruptCheckpoint("'" + path + "': payload size mismatch");
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("'" + path + "': malformed header: " + e.what());
    }
    return ckpt;
}

// Rebuilds an encoder from checkpointed parameters.
inline EncoderState encoder_from_checkpoint(const Checkpoint& ckpt) {
    EncoderState state = EncoderState::init(ckpt.config, 0);
    for (const auto& [name, param] : state.named_parameters()) {
        const Tensor* stored = ckpt.find(name);
        if (stored == nullptr) {
            throw CorruptCheckpoint("checkpoint is missing tensor '" + name + "'");
        }
        if (stored->shape() != param.shape()) {
            throw CorruptCheckpoint("checkpoint tensor '" + name + "' has shape " +
                                    shape_str(stored->shape()) + ", expected " +
                                    shape_str(param.shape()));
        }
        std::copy(stored->data().begin(), stored->data().end(), param.data().begin());
    }
    return state;
}

// Guards a checkpoint against a caller expecting different wiring.
inline void ensure_wiring(const Checkpoint& ckpt, const WiringMode& requested) {
    if (!(ckpt.config.wiring == requested)) {
        throw WiringMismatch("checkpoint wiring does not match the requested wiring mode");
    }
}

}  // namespace elcbert
