#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "elcbert/encoder.hpp"
#include "elcbert/error.hpp"
#include "elcbert/training.hpp"

namespace elcbert {

// Training-run description: wiring preset, encoder dimensions, optimizer
// schedule, data paths, output directory. Unknown keys are rejected, not
// ignored; a silent typo in a wiring flag would invalidate an experiment.
struct RunConfig {
    std::string preset;
    std::vector<std::string> corpus_paths;
    std::string vocab_path;  // optional; when empty the vocab is built from the corpus
    std::string out_dir;
    std::string resume_path;  // optional
    EncoderConfig encoder;    // vocab_size acts as the build_vocab cap
    TrainConfig train;
    std::uint64_t log_every = 50;
    std::uint64_t checkpoint_every = 0;

    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) {
            throw ConfigError("config: top level must be a JSON object");
        }
        static const std::vector<std::string> known = {
            "preset",         "corpus",       "vocab_path",  "out_dir",     "resume",
            "num_layers",     "hidden_size",  "num_heads",   "ff_size",     "vocab_size",
            "max_seq_len",    "dropout",      "layer_norm_eps", "mix_eps",
            "steps",          "batch_size",   "seq_len",     "mask_ratio",  "peak_lr",
            "final_lr",       "warmup_ratio", "weight_decay", "grad_clip",  "seed",
            "optimizer",      "log_every",    "checkpoint_every"};
        for (const auto& [key, value] : j.items()) {
            bool ok = false;
            for (const std::string& k : known) {
                ok = ok || k == key;
            }
            if (!ok) {
                throw ConfigError("config: unknown key '" + key + "'");
            }
        }
        const auto require = [&](const char* key) -> const nlohmann::json& {
            if (!j.contains(key)) {
                throw ConfigError("config: missing required key '" + std::string(key) + "'");
            }
            return j.at(key);
        };

        RunConfig rc;
        rc.preset = require("preset").get<std::string>();
        rc.encoder.wiring = WiringMode::preset(rc.preset);

        const nlohmann::json& corpus = require("corpus");
        if (corpus.is_string()) {
            rc.corpus_paths.push_back(corpus.get<std::string>());
        } else if (corpus.is_array()) {
            rc.corpus_paths = corpus.get<std::vector<std::string>>();
        } else {
            throw ConfigError("config: 'corpus' must be a path or a list of paths");
        }
        if (rc.corpus_paths.empty()) {
            throw ConfigError("config: 'corpus' lists no files");
        }
        rc.out_dir = require("out_dir").get<std::string>();

        try {
            if (j.contains("vocab_path")) rc.vocab_path = j.at("vocab_path").get<std::string>();
            if (j.contains("resume")) rc.resume_path = j.at("resume").get<std::string>();
            if (j.contains("num_layers")) rc.encoder.num_layers = j.at("num_layers").get<std::size_t>();
            if (j.contains("hidden_size")) rc.encoder.hidden_size = j.at("hidden_size").get<std::size_t>();
            if (j.contains("num_heads")) rc.encoder.num_heads = j.at("num_heads").get<std::size_t>();
            if (j.contains("ff_size")) rc.encoder.ff_size = j.at("ff_size").get<std::size_t>();
            if (j.contains("vocab_size")) rc.encoder.vocab_size = j.at("vocab_size").get<std::size_t>();
            if (j.contains("max_seq_len")) rc.encoder.max_seq_len = j.at("max_seq_len").get<std::size_t>();
            if (j.contains("dropout")) rc.encoder.dropout = j.at("dropout").get<double>();
            if (j.contains("layer_norm_eps")) rc.encoder.layer_norm_eps = j.at("layer_norm_eps").get<double>();
            if (j.contains("mix_eps")) rc.encoder.mix_eps = j.at("mix_eps").get<double>();
            if (j.contains("steps")) rc.train.steps = j.at("steps").get<std::uint64_t>();
            if (j.contains("batch_size")) rc.train.batch_size = j.at("batch_size").get<std::size_t>();
            if (j.contains("seq_len")) rc.train.seq_len = j.at("seq_len").get<std::size_t>();
            if (j.contains("mask_ratio")) rc.train.mask_ratio = j.at("mask_ratio").get<double>();
            if (j.contains("peak_lr")) rc.train.peak_lr = j.at("peak_lr").get<double>();
            if (j.contains("final_lr")) rc.train.final_lr = j.at("final_lr").get<double>();
            if (j.contains("warmup_ratio")) rc.train.warmup_ratio = j.at("warmup_ratio").get<double>();
            if (j.contains("weight_decay")) rc.train.weight_decay = j.at("weight_decay").get<double>();
            if (j.contains("grad_clip")) rc.train.grad_clip = j.at("grad_clip").get<double>();
            if (j.contains("seed")) rc.train.seed = j.at("seed").get<std::uint64_t>();
            if (j.contains("log_every")) rc.log_every = j.at("log_every").get<std::uint64_t>();
            if (j.contains("checkpoint_every"))
                rc.checkpoint_every = j.at("checkpoint_every").get<std::uint64_t>();
            if (j.contains("optimizer")) {
                const std::string opt = j.at("optimizer").get<std::string>();
                if (opt == "adamw") {
                    rc.train.optimizer = OptimizerKind::kAdamW;
                } else if (opt == "lamb") {
                    rc.train.optimizer = OptimizerKind::kLamb;
                } else {
                    throw ConfigError("config: 'optimizer' must be adamw or lamb, got '" + opt +
                                      "'");
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }

        if (rc.train.seq_len > rc.encoder.max_seq_len) {
            throw ConfigError("config: seq_len exceeds max_seq_len");
        }
        return rc;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) {
            throw IoFailure("cannot open config '" + path + "'");
        }
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config '" + path + "': " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace elcbert
