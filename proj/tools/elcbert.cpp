// elcbert: train / eval / inspect / gradcheck / gen-data for the desk-scale
// layer-weighted MLM encoder. Every path here is a thin shell over the
// library; outputs byte-match direct library calls.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "elcbert/checkpoint.hpp"
#include "elcbert/data.hpp"
#include "elcbert/encoder.hpp"
#include "elcbert/eval.hpp"
#include "elcbert/gradcheck.hpp"
#include "elcbert/mixing.hpp"
#include "elcbert/run_config.hpp"
#include "elcbert/training.hpp"

namespace fs = std::filesystem;

namespace {

// ELCB_LOG={error,info,debug} selects stderr verbosity only; it never changes
// behavior or outputs.
int log_verbosity() {
    static const int level = [] {
        const char* env = std::getenv("ELCB_LOG");
        if (env == nullptr) {
            return 0;
        }
        const std::string v(env);
        if (v == "debug") {
            return 2;
        }
        if (v == "info") {
            return 1;
        }
        return 0;
    }();
    return level;
}

void log_info(const std::string& msg) {
    if (log_verbosity() >= 1) {
        std::cerr << "[info] " << msg << '\n';
    }
}

void log_debug(const std::string& msg) {
    if (log_verbosity() >= 2) {
        std::cerr << "[debug] " << msg << '\n';
    }
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw elcbert::IoFailure("cannot write '" + path.string() + "'");
    }
    os << content;
    if (!os.flush()) {
        throw elcbert::IoFailure("write failed on '" + path.string() + "'");
    }
}

void write_alpha_exports(const fs::path& dir, const elcbert::Checkpoint& ckpt) {
    const elcbert::LayerReport report = elcbert::layer_report(ckpt);
    std::ostringstream csv;
    elcbert::write_alpha_csv(csv, report.alpha);
    write_text_file(dir / "alpha.csv", csv.str());
    std::ostringstream pgm;
    elcbert::write_alpha_pgm(pgm, report.rescaled);
    write_text_file(dir / "alpha.pgm", pgm.str());
}

int cmd_train(const std::string& config_path) {
    elcbert::RunConfig rc = elcbert::RunConfig::load(config_path);
    fs::create_directories(rc.out_dir);

    log_info("ingesting " + std::to_string(rc.corpus_paths.size()) + " corpus file(s)");
    const auto docs = elcbert::ingest(rc.corpus_paths);
    elcbert::Vocab vocab;
    if (rc.vocab_path.empty()) {
        vocab = elcbert::build_vocab(docs, rc.encoder.vocab_size);
    } else {
        vocab = elcbert::load_vocab(rc.vocab_path);
        if (vocab.size() > rc.encoder.vocab_size) {
            throw elcbert::ConfigError("config: vocab file holds " +
                                       std::to_string(vocab.size()) +
                                       " ids, above the vocab_size cap");
        }
    }
    rc.encoder.vocab_size = vocab.size();
    rc.encoder.validate();
    rc.train.validate();
    const elcbert::Corpus corpus = elcbert::encode_corpus(docs, vocab);
    log_info("corpus: " + std::to_string(corpus.num_sequences()) + " sequences, vocab " +
             std::to_string(vocab.size()));

    elcbert::EncoderState state = elcbert::EncoderState::init(rc.encoder, rc.train.seed);
    std::optional<elcbert::Checkpoint> resume;
    if (!rc.resume_path.empty()) {
        resume = elcbert::load_checkpoint(rc.resume_path);
        elcbert::ensure_wiring(*resume, rc.encoder.wiring);
        log_info("resuming from step " + std::to_string(resume->step));
    }

    elcbert::TrainCallbacks callbacks;
    const std::uint64_t log_every = rc.log_every == 0 ? 1 : rc.log_every;
    callbacks.on_step = [&](const elcbert::StepRecord& r) {
        if ((r.step + 1) % log_every == 0 || r.step + 1 == rc.train.steps) {
            log_info("step " + std::to_string(r.step) + " loss " + std::to_string(r.loss) +
                     " lr " + std::to_string(r.lr));
        } else {
            log_debug("step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
        }
    };
    callbacks.checkpoint_every = rc.checkpoint_every;
    callbacks.on_checkpoint = [&](const elcbert::Checkpoint& c) {
        const fs::path path = fs::path(rc.out_dir) / ("checkpoint-" + std::to_string(c.step) +
                                                      ".ckpt");
        elcbert::save_checkpoint(path.string(), c);
        log_info("wrote " + path.string());
    };

    const elcbert::TrainResult result = elcbert::train(state, corpus, vocab, rc.train, callbacks,
                                                       resume ? &*resume : nullptr);

    const fs::path out(rc.out_dir);
    elcbert::save_checkpoint((out / "checkpoint.ckpt").string(), result.checkpoint);
    std::ostringstream trace;
    elcbert::write_trace_csv(trace, result.trace);
    write_text_file(out / "loss.csv", trace.str());
    elcbert::save_vocab((out / "vocab.txt").string(), vocab);
    if (rc.encoder.wiring.is_elc()) {
        write_alpha_exports(out, result.checkpoint);
    }

    std::cout << "trained " << rc.preset << " for " << result.trace.size() << " step(s); outputs in "
              << rc.out_dir << '\n';
    if (!result.trace.empty()) {
        std::cout << "final loss " << result.trace.back().loss << '\n';
    }
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& pairs_path,
             const std::string& out_dir) {
    const elcbert::Checkpoint ckpt = elcbert::load_checkpoint(ckpt_path);
    const elcbert::EncoderState state = elcbert::encoder_from_checkpoint(ckpt);
    const elcbert::Vocab vocab = elcbert::Vocab::from_tokens(ckpt.vocab_tokens);
    const auto pairs = elcbert::load_pairs(pairs_path);
    log_info("scoring " + std::to_string(pairs.size()) + " pairs");
    const elcbert::EvalResult result = elcbert::minimal_pair_eval(state, vocab, pairs);

    fs::create_directories(out_dir);
    std::ostringstream csv;
    elcbert::write_eval_csv(csv, result);
    write_text_file(fs::path(out_dir) / "results.csv", csv.str());

    std::cout << "accuracy " << result.accuracy() << " over " << result.scored << " pairs ("
              << result.skipped << " skipped)\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt_path, const std::string& out_dir) {
    const elcbert::Checkpoint ckpt = elcbert::load_checkpoint(ckpt_path);
    const elcbert::LayerReport report = elcbert::layer_report(ckpt);
    fs::create_directories(out_dir);
    write_alpha_exports(out_dir, ckpt);
    for (std::size_t i = 0; i < report.alpha.size(); ++i) {
        std::cout << "dest " << (i + 1) << ": argmax_src " << report.argmax_src[i] << " entropy "
                  << report.entropy[i] << " embedding_weight " << report.embedding_profile[i]
                  << '\n';
    }
    std::cout << "wrote alpha.csv and alpha.pgm to " << out_dir << '\n';
    return 0;
}

int cmd_gradcheck(const std::string& preset, std::uint64_t seed, bool corrupt) {
    const elcbert::GradcheckResult result =
        elcbert::model_gradcheck(elcbert::WiringMode::preset(preset), seed, corrupt);
    std::cout << "max relative error " << result.max_rel_error << " over " << result.entries
              << " parameter entries\n";
    return result.max_rel_error < 1e-4 ? 0 : 2;
}

int cmd_gen_data(const std::string& kind, std::uint64_t n, std::uint64_t seed,
                 const std::string& out_dir, std::uint64_t sentences) {
    if (kind != "agreement") {
        throw elcbert::ConfigError("gen-data: unknown kind '" + kind + "'");
    }
    const elcbert::AgreementGrammar grammar = elcbert::AgreementGrammar::standard();
    fs::create_directories(out_dir);
    const fs::path out(out_dir);

    const auto corpus_lines = elcbert::gen_agreement_corpus(sentences, seed, grammar);
    std::string corpus_text;
    for (const std::string& line : corpus_lines) {
        corpus_text += line;
        corpus_text += '\n';
    }
    write_text_file(out / "corpus.txt", corpus_text);

    // vocabulary: frequency-ranked corpus words, then any remaining grammar
    // words (the held-out nouns) appended in grammar order
    const elcbert::Vocab freq = elcbert::build_vocab({corpus_lines}, 4096);
    std::vector<std::string> tokens = freq.tokens;
    for (const std::string& word : grammar.all_words()) {
        if (freq.ids.find(word) == freq.ids.end()) {
            tokens.push_back(word);
        }
    }
    elcbert::save_vocab((out / "vocab.txt").string(), elcbert::Vocab::from_tokens(tokens));

    std::ostringstream test_pairs;
    elcbert::write_pairs_file(test_pairs, elcbert::gen_agreement_pairs(n, seed, grammar, true));
    write_text_file(out / "pairs_test.tsv", test_pairs.str());
    std::ostringstream train_pairs;
    elcbert::write_pairs_file(train_pairs, elcbert::gen_agreement_pairs(n, seed, grammar, false));
    write_text_file(out / "pairs_train.tsv", train_pairs.str());

    std::cout << "wrote corpus.txt (" << corpus_lines.size() << " sentences), vocab.txt, "
              << "pairs_test.tsv and pairs_train.tsv (" << n << " pairs each) to " << out_dir
              << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale layer-weighted MLM encoder"};
    app.require_subcommand(1);

    std::string config_path;
    CLI::App* train = app.add_subcommand("train", "pretrain from a JSON run config");
    train->add_option("--config", config_path, "run config path")->required();

    std::string ckpt_path;
    std::string pairs_path;
    std::string out_dir = ".";
    CLI::App* eval = app.add_subcommand("eval", "zero-shot minimal-pair preference");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    eval->add_option("--pairs", pairs_path, "pairs file (good<TAB>bad<TAB>phenomenon)")->required();
    eval->add_option("--out", out_dir, "output directory for results.csv");

    std::string inspect_ckpt;
    std::string inspect_out = ".";
    CLI::App* inspect = app.add_subcommand("inspect", "export the layer-weight matrix");
    inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint path")->required();
    inspect->add_option("--out", inspect_out, "output directory for alpha.csv / alpha.pgm");

    std::string preset = "elc";
    std::uint64_t seed = 0;
    bool corrupt = false;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_option("--preset", preset, "wiring preset")->required();
    gradcheck->add_option("--seed", seed, "rng seed");
    gradcheck->add_flag("--corrupt-one-gradient", corrupt,
                        "debug: sever one parameter's gradient; the check must then fail");

    std::string kind = "agreement";
    std::uint64_t n = 500;
    std::uint64_t gen_seed = 0;
    std::uint64_t sentences = 15000;
    std::string gen_out = ".";
    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic corpus and minimal pairs");
    gen->add_option("--kind", kind, "dataset kind (agreement)");
    gen->add_option("--n", n, "number of minimal pairs per split");
    gen->add_option("--seed", gen_seed, "rng seed");
    gen->add_option("--sentences", sentences, "corpus sentence count");
    gen->add_option("--out", gen_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            return cmd_train(config_path);
        }
        if (eval->parsed()) {
            return cmd_eval(ckpt_path, pairs_path, out_dir);
        }
        if (inspect->parsed()) {
            return cmd_inspect(inspect_ckpt, inspect_out);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(preset, seed, corrupt);
        }
        if (gen->parsed()) {
            return cmd_gen_data(kind, n, gen_seed, gen_out, sentences);
        }
    } catch (const elcbert::InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
