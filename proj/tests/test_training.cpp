#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "elcbert/training.hpp"

using namespace elcbert;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    const fs::path dir = fs::temp_directory_path() / "elcbert_training_test";
    fs::create_directories(dir);
    return dir;
}

// tiny synthetic corpus: patterned sentences over a small vocabulary
Corpus demo_corpus(const Vocab& vocab, std::size_t sentences) {
    std::vector<RawDocument> docs;
    RawDocument doc;
    for (std::size_t i = 0; i < sentences; ++i) {
        doc.push_back("tok" + std::to_string(i % 7) + " tok" + std::to_string((i + 1) % 7) +
                      " tok" + std::to_string((i + 2) % 7) + " end");
    }
    docs.push_back(doc);
    return encode_corpus(docs, vocab);
}

Vocab demo_vocab() {
    std::vector<RawDocument> docs;
    RawDocument doc;
    for (int i = 0; i < 7; ++i) {
        doc.push_back("tok" + std::to_string(i) + " end");
    }
    docs.push_back(doc);
    return build_vocab(docs, 64);
}

EncoderConfig demo_encoder_config(const std::string& preset, std::size_t vocab_size) {
    EncoderConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_size = 16;
    cfg.num_heads = 2;
    cfg.ff_size = 32;
    cfg.vocab_size = vocab_size;
    cfg.max_seq_len = 8;
    cfg.wiring = WiringMode::preset(preset);
    return cfg;
}

TrainConfig demo_train_config(std::uint64_t steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 4;
    cfg.seq_len = 8;
    cfg.peak_lr = 2e-3;
    cfg.final_lr = 2e-4;
    cfg.warmup_ratio = 0.1;
    cfg.seed = 7;
    return cfg;
}

bool bitwise_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

TEST_CASE("mask_tokens selection statistics") {
    std::vector<std::int32_t> tokens(10000);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = static_cast<std::int32_t>(5 + i % 50);
    }
    Rng rng(3);
    const MaskedBatch mb = mask_tokens(tokens, 0.15, {0, 1, 2, 3, 4}, rng, 64);
    const std::size_t selected = count_labeled(mb.labels);
    const double fraction = static_cast<double>(selected) / 10000.0;
    CHECK(fraction > 0.14);
    CHECK(fraction < 0.16);

    // of the selected positions, roughly 80% carry [MASK]
    std::size_t masked = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (mb.labels[i] >= 0 && mb.tokens[i] == Vocab::kMask) {
            ++masked;
        }
    }
    const double mask_share = static_cast<double>(masked) / static_cast<double>(selected);
    CHECK(mask_share > 0.75);
    CHECK(mask_share < 0.85);
}

TEST_CASE("mask_tokens never selects special tokens") {
    std::vector<std::int32_t> tokens;
    for (int i = 0; i < 1000; ++i) {
        tokens.push_back(Vocab::kCls);
        tokens.push_back(static_cast<std::int32_t>(5 + i % 20));
        tokens.push_back(Vocab::kSep);
        tokens.push_back(Vocab::kPad);
    }
    Rng rng(11);
    const MaskedBatch mb = mask_tokens(tokens, 0.5, {0, 1, 2, 3, 4}, rng, 32);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 5) {
            CHECK(mb.labels[i] == -1);
            CHECK(mb.tokens[i] == tokens[i]);
        }
    }
}

TEST_CASE("mask_tokens errors and edge cases") {
    Rng rng(13);
    std::vector<std::int32_t> all_special = {Vocab::kCls, Vocab::kSep, Vocab::kPad};
    CHECK_THROWS_AS(mask_tokens(all_special, 0.15, {0, 1, 2, 3, 4}, rng, 32), NoMaskableTokens);

    // a vanishing ratio leaves everything unlabeled without erroring
    std::vector<std::int32_t> tokens(64, 7);
    const MaskedBatch mb = mask_tokens(tokens, 1e-12, {0, 1, 2, 3, 4}, rng, 32);
    CHECK(count_labeled(mb.labels) == 0);
}

TEST_CASE("mlm_loss closed forms") {
    // uniform logits over 64 classes cost exactly ln 64
    const Tensor logits = Tensor::zeros({3, 64});
    const Tensor loss = mlm_loss(logits, {5, -1, 40});
    CHECK(loss.item() == Catch::Approx(std::log(64.0)).margin(1e-6));
    CHECK(loss.item() == Catch::Approx(4.15888).margin(1e-5));

    // a one-hot-correct margin drives the loss to zero
    Tensor sharp = Tensor::zeros({1, 8});
    sharp.data()[3] = 50.0;
    CHECK(mlm_loss(sharp, {3}).item() < 1e-6);

    // single labeled position equals that position's cross entropy
    Rng rng(17);
    Tensor one = Tensor::zeros({4, 8});
    for (double& v : one.data()) {
        v = -1.0 + 2.0 * rng.next_double();
    }
    const Tensor whole = mlm_loss(one, {-1, 6, -1, -1});
    const Tensor row = slice_rows(one, 1, 1);
    const Tensor alone = mlm_loss(row, {6});
    CHECK(whole.item() == Catch::Approx(alone.item()).margin(1e-12));

    CHECK_THROWS_AS(mlm_loss(logits, {-1, -1, -1}), NoLabeledPositions);
}

TEST_CASE("lr schedule shape") {
    TrainConfig cfg = demo_train_config(1000);
    cfg.peak_lr = 1.0;
    cfg.final_lr = 0.1;
    cfg.warmup_ratio = 0.1;  // 100 warmup steps
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(50, cfg) == Catch::Approx(0.5).margin(1e-12));
    CHECK(lr_at(100, cfg) == Catch::Approx(1.0).margin(1e-12));
    CHECK(lr_at(1000, cfg) == Catch::Approx(0.1).margin(1e-12));
    CHECK(lr_at(550, cfg) == Catch::Approx(0.55).margin(1e-9));  // midpoint of the decay
    CHECK_THROWS_AS(lr_at(1001, cfg), StepOutOfRange);
}

TEST_CASE("optimizer fixed points and hand-checked step") {
    TrainConfig cfg = demo_train_config(10);
    cfg.weight_decay = 0.0;

    // zero gradients leave parameters untouched
    std::vector<std::pair<std::string, Tensor>> params;
    params.emplace_back("w", Tensor::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true));
    OptimizerState opt = OptimizerState::init(params);
    const double norm = optimizer_step(opt, params, 0.1, cfg);
    CHECK(norm == 0.0);
    CHECK(params[0].second.at(0) == 1.0);
    CHECK(params[0].second.at(3) == 4.0);

    // single scalar, one step from zero moments: update = lr * g / (|g| + eps)
    std::vector<std::pair<std::string, Tensor>> single;
    single.emplace_back("x", Tensor::scalar(0.0).set_requires_grad(true));
    OptimizerState opt2 = OptimizerState::init(single);
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(mul(single[0].second, Tensor::scalar(0.7)));
    }
    CHECK(single[0].second.grad_at(0) == 0.7);
    optimizer_step(opt2, single, 0.01, cfg);
    const double expected = -0.01 * 0.7 / (0.7 + kAdamEps);
    CHECK(single[0].second.at(0) == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("gradient clipping rescales the whole gradient") {
    TrainConfig cfg = demo_train_config(10);
    cfg.grad_clip = 2.0;
    cfg.weight_decay = 0.0;

    std::vector<std::pair<std::string, Tensor>> params;
    Tensor p = Tensor::zeros({4}).set_requires_grad(true);
    params.emplace_back("p", p);
    OptimizerState opt = OptimizerState::init(params);
    // plant a gradient of norm 10
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(mul_constant(p, {5.0, 5.0, 5.0, 5.0})));
    }
    const double norm = optimizer_step(opt, params, 0.01, cfg);
    CHECK(norm == Catch::Approx(10.0).margin(1e-12));
    // the first moment saw the clipped gradient: (1-beta1) * 5 * 0.2
    CHECK(opt.m[0].at(0) == Catch::Approx(0.1 * 5.0 * 0.2).margin(1e-12));
}

TEST_CASE("non-finite gradients are rejected") {
    TrainConfig cfg = demo_train_config(10);
    std::vector<std::pair<std::string, Tensor>> params;
    Tensor p = Tensor::zeros({2}).set_requires_grad(true);
    params.emplace_back("p", p);
    OptimizerState opt = OptimizerState::init(params);
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(p));
    }
    p.node()->grad[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(optimizer_step(opt, params, 0.01, cfg), NonFiniteGradient);
}

TEST_CASE("lamb applies a trust ratio") {
    TrainConfig cfg = demo_train_config(10);
    cfg.optimizer = OptimizerKind::kLamb;
    cfg.weight_decay = 0.0;
    std::vector<std::pair<std::string, Tensor>> params;
    Tensor p = Tensor::from({2, 1}, {3.0, 4.0}).set_requires_grad(true);  // norm 5
    params.emplace_back("p", p);
    OptimizerState opt = OptimizerState::init(params);
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(mul_constant(p, {1.0, 1.0})));
    }
    optimizer_step(opt, params, 0.01, cfg);
    // update direction is ~[1,1]/ (1+eps) with norm ~sqrt(2); trust = 5/sqrt(2)
    const double u = 1.0 / (1.0 + kAdamEps);
    const double trust = 5.0 / std::sqrt(2.0 * u * u);
    CHECK(p.at(0) == Catch::Approx(3.0 - 0.01 * trust * u).margin(1e-9));
}

TEST_CASE("checkpoint round trip is byte identical") {
    const Vocab vocab = demo_vocab();
    const EncoderConfig ecfg = demo_encoder_config("elc-weighted", vocab.size());
    EncoderState state = EncoderState::init(ecfg, 5);
    OptimizerState opt = OptimizerState::init(state.named_parameters());
    const Checkpoint ckpt = make_checkpoint(state, opt, vocab.tokens, 17, 42);

    const std::string p1 = (test_dir() / "a.ckpt").string();
    const std::string p2 = (test_dir() / "b.ckpt").string();
    save_checkpoint(p1, ckpt);
    const Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(p2, loaded);

    std::ifstream f1(p1, std::ios::binary);
    std::ifstream f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(!b1.empty());
    CHECK(b1 == b2);

    CHECK(loaded.step == 17);
    CHECK(loaded.seed == 42);
    CHECK(loaded.vocab_tokens == vocab.tokens);
    CHECK(loaded.config == ecfg);
    REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        CHECK(loaded.tensors[i].first == ckpt.tensors[i].first);
        REQUIRE(loaded.tensors[i].second.numel() == ckpt.tensors[i].second.numel());
        for (std::size_t j = 0; j < ckpt.tensors[i].second.numel(); ++j) {
            CHECK(bitwise_equal(loaded.tensors[i].second.at(j), ckpt.tensors[i].second.at(j)));
        }
    }
}

TEST_CASE("corrupt checkpoints are rejected atomically") {
    const Vocab vocab = demo_vocab();
    EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), 5);
    OptimizerState opt = OptimizerState::init(state.named_parameters());
    const std::string path = (test_dir() / "c.ckpt").string();
    save_checkpoint(path, make_checkpoint(state, opt, vocab.tokens, 0, 1));

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const auto write_bytes = [&](const std::string& content) {
        const std::string p = (test_dir() / "broken.ckpt").string();
        std::ofstream os(p, std::ios::binary);
        os << content;
        os.close();
        return p;
    };

    CHECK_THROWS_AS(load_checkpoint(write_bytes(bytes.substr(0, bytes.size() / 2))),
                    CorruptCheckpoint);
    CHECK_THROWS_AS(load_checkpoint(write_bytes(bytes.substr(0, 10))), CorruptCheckpoint);
    CHECK_THROWS_AS(load_checkpoint(write_bytes("LCBE" + bytes.substr(4))), CorruptCheckpoint);
    CHECK_THROWS_AS(load_checkpoint((test_dir() / "nonexistent.ckpt").string()), IoFailure);

    std::string wrong_version = bytes;
    wrong_version[4] = 9;
    CHECK_THROWS_AS(load_checkpoint(write_bytes(wrong_version)), VersionMismatch);

    // appended garbage is caught by the payload size check
    CHECK_THROWS_AS(load_checkpoint(write_bytes(bytes + "xx")), CorruptCheckpoint);
}

TEST_CASE("wiring mismatch is reported explicitly") {
    const Vocab vocab = demo_vocab();
    EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), 5);
    OptimizerState opt = OptimizerState::init(state.named_parameters());
    const Checkpoint ckpt = make_checkpoint(state, opt, vocab.tokens, 0, 1);
    CHECK_THROWS_AS(ensure_wiring(ckpt, WiringMode::preset("bert-baseline")), WiringMismatch);

    EncoderState other = EncoderState::init(demo_encoder_config("bert-baseline", vocab.size()), 5);
    TrainConfig tcfg = demo_train_config(4);
    const Vocab v2 = vocab;
    const Corpus corpus = demo_corpus(v2, 32);
    CHECK_THROWS_AS(train(other, corpus, v2, tcfg, {}, &ckpt), WiringMismatch);
}

TEST_CASE("train with zero steps returns the initial checkpoint") {
    const Vocab vocab = demo_vocab();
    const Corpus corpus = demo_corpus(vocab, 16);
    EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), 5);
    TrainConfig cfg = demo_train_config(0);
    const TrainResult res = train(state, corpus, vocab, cfg);
    CHECK(res.trace.empty());
    CHECK(res.checkpoint.step == 0);
    CHECK(res.checkpoint.find("embedding.token") != nullptr);
    CHECK(res.checkpoint.find("optim.m.embedding.token") != nullptr);
}

TEST_CASE("training is bitwise deterministic") {
    const Vocab vocab = demo_vocab();
    const Corpus corpus = demo_corpus(vocab, 32);
    const TrainConfig cfg = demo_train_config(10);

    const auto run = [&] {
        EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
        return train(state, corpus, vocab, cfg);
    };
    const TrainResult a = run();
    const TrainResult b = run();
    REQUIRE(a.trace.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(bitwise_equal(a.trace[i].loss, b.trace[i].loss));
        CHECK(bitwise_equal(a.trace[i].grad_norm, b.trace[i].grad_norm));
    }

    const std::string p1 = (test_dir() / "det1.ckpt").string();
    const std::string p2 = (test_dir() / "det2.ckpt").string();
    save_checkpoint(p1, a.checkpoint);
    save_checkpoint(p2, b.checkpoint);
    std::ifstream f1(p1, std::ios::binary);
    std::ifstream f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("resume reproduces the uninterrupted loss trace") {
    const Vocab vocab = demo_vocab();
    const Corpus corpus = demo_corpus(vocab, 32);
    const TrainConfig cfg = demo_train_config(12);

    EncoderState full_state = EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
    const TrainResult full = train(full_state, corpus, vocab, cfg);

    // interrupted run: same config, captured at the step-6 interval
    // checkpoint, then round-tripped through disk and resumed to 12
    EncoderState half_state = EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
    TrainCallbacks cb;
    cb.checkpoint_every = 6;
    const std::string mid_path = (test_dir() / "mid.ckpt").string();
    cb.on_checkpoint = [&](const Checkpoint& c) {
        if (c.step == 6) {
            save_checkpoint(mid_path, c);
        }
    };
    train(half_state, corpus, vocab, cfg, cb);
    const Checkpoint mid = load_checkpoint(mid_path);

    EncoderState resumed_state =
        EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
    const TrainResult rest = train(resumed_state, corpus, vocab, cfg, {}, &mid);

    REQUIRE(rest.trace.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(rest.trace[i].step == full.trace[6 + i].step);
        CHECK(bitwise_equal(rest.trace[i].loss, full.trace[6 + i].loss));
        CHECK(bitwise_equal(rest.trace[i].grad_norm, full.trace[6 + i].grad_norm));
    }

    // final parameters agree bitwise with the uninterrupted run
    const auto pa = full_state.named_parameters();
    const auto pb = resumed_state.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t j = 0; j < pa[i].second.numel(); ++j) {
            CHECK(bitwise_equal(pa[i].second.at(j), pb[i].second.at(j)));
        }
    }
}

TEST_CASE("short training run reduces the loss") {
    const Vocab vocab = demo_vocab();
    const Corpus corpus = demo_corpus(vocab, 64);
    TrainConfig cfg = demo_train_config(80);
    cfg.batch_size = 8;
    EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
    const TrainResult res = train(state, corpus, vocab, cfg);
    double early = 0.0;
    double late = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        early += res.trace[i].loss / 10.0;
        late += res.trace[res.trace.size() - 10 + i].loss / 10.0;
    }
    CHECK(late < early);

    // clipping invariant held throughout
    for (const StepRecord& r : res.trace) {
        const double post = std::min(r.grad_norm, cfg.grad_clip);
        CHECK(post <= cfg.grad_clip + 1e-9);
    }
}

TEST_CASE("trace csv format") {
    std::ostringstream os;
    write_trace_csv(os, {{0, 0.5, 1.25, 3.0}});
    CHECK(os.str() == "step,lr,loss,grad_norm\n0,0.5,1.25,3\n");
}

TEST_CASE("interval checkpoints fire through the callback") {
    const Vocab vocab = demo_vocab();
    const Corpus corpus = demo_corpus(vocab, 32);
    TrainConfig cfg = demo_train_config(9);
    EncoderState state = EncoderState::init(demo_encoder_config("elc", vocab.size()), cfg.seed);
    TrainCallbacks cb;
    cb.checkpoint_every = 3;
    std::vector<std::uint64_t> seen;
    cb.on_checkpoint = [&](const Checkpoint& c) { seen.push_back(c.step); };
    train(state, corpus, vocab, cfg, cb);
    CHECK(seen == std::vector<std::uint64_t>{3, 6});
}
