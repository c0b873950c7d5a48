#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "lwaft/model.hpp"
#include "lwaft/optim.hpp"
#include "lwaft/train.hpp"
#include "test_util.hpp"

using namespace lwaft;
using lwaft::testing::make_sequence;
using lwaft::testing::small_transducer;

namespace {

int argmax_class(const ParamStore& params, const ModelSpec& spec, const DenseExample& ex) {
    Batch one;
    one.dense.push_back(ex);
    // cross-entropy for each candidate label; the smallest is the prediction
    int best = 0;
    double best_loss = 1e300;
    for (int c = 0; c < spec.output_dim; ++c) {
        one.dense[0].label = c;
        const double l = forward_loss(params, spec, one).loss;
        if (l < best_loss) {
            best_loss = l;
            best = c;
        }
    }
    return best;
}

} // namespace

TEST(BuildModel, MlpSmokeParameterCount) {
    const auto spec = ModelSpec::mlp_smoke(8, 4, 2);
    const auto params = build_model(spec);
    EXPECT_EQ(params.total_count(), 8u * 4 + 4 + 4 * 2 + 2);
    EXPECT_EQ(params.total_count(), 46u);
}

TEST(BuildModel, SameSpecAndSeedIsByteIdentical) {
    const auto spec = small_transducer();
    EXPECT_EQ(serialize_checkpoint(build_model(spec)), serialize_checkpoint(build_model(spec)));
    auto other = spec;
    other.seed += 1;
    EXPECT_NE(serialize_checkpoint(build_model(spec)), serialize_checkpoint(build_model(other)));
}

TEST(BuildModel, HeadDivisibility) {
    auto spec = small_transducer(64, 1, 4);
    EXPECT_NO_THROW(build_model(spec));
    spec.num_heads = 5;
    try {
        build_model(spec);
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("num_heads"), std::string::npos);
    }
}

TEST(BuildModel, LayerNamesEncodeRole) {
    const auto params = build_model(small_transducer());
    EXPECT_TRUE(params.find("embed.tok").has_value());
    EXPECT_TRUE(params.find("attn.0.qkv.w").has_value());
    EXPECT_TRUE(params.find("mlp.1.w1").has_value());
    EXPECT_TRUE(params.find("head.w").has_value());
    std::size_t sum = 0;
    for (const auto& l : params.layers()) {
        sum += l.values.size();
    }
    EXPECT_EQ(sum, params.total_count());
}

TEST(BuildModel, InvalidSpecsRejected) {
    auto spec = small_transducer();
    spec.context_len = 1;
    EXPECT_THROW(build_model(spec), ValidationError);
    spec = small_transducer();
    spec.vocab_size = 3;
    EXPECT_THROW(build_model(spec), ValidationError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
    const auto params = build_model(small_transducer());
    const auto bytes = serialize_checkpoint(params);
    const auto back = parse_checkpoint(bytes);
    EXPECT_TRUE(back.bit_equal(params));
    for (std::size_t i = 0; i < back.num_layers(); ++i) {
        EXPECT_EQ(back.name(i), params.name(i));
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(parse_checkpoint(truncated), ValidationError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bad_magic), ValidationError);
    auto bad_version = bytes;
    bad_version[6] = 9;
    EXPECT_THROW(parse_checkpoint(bad_version), ValidationError);
}

TEST(ForwardLoss, UniformLogitsGiveLogVocab) {
    const auto spec = small_transducer();
    auto params = build_model(spec);
    const auto head = *params.find("head.w");
    for (auto& w : params.mutable_values(head)) {
        w = 0.0;
    }
    Batch b;
    b.sequences.push_back(make_sequence("abc>", "xyz"));
    EXPECT_NEAR(forward_loss(params, spec, b).loss, std::log(static_cast<double>(spec.vocab_size)), 1e-12);
}

TEST(ForwardLoss, AllPaddingIsEmptyTarget) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    Batch b;
    auto s = make_sequence("abc>", "xyz");
    std::fill(s.target.begin(), s.target.end(), 0);
    b.sequences.push_back(s);
    try {
        forward_loss(params, spec, b);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("empty target"), std::string::npos);
    }
    EXPECT_THROW(forward_loss(params, spec, Batch{}), ValidationError);
}

TEST(ForwardLoss, OutOfRangeTokenAndOverlongSequence) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    Batch b;
    b.sequences.push_back(make_sequence("ab", "c"));
    b.sequences[0].tokens[1] = spec.vocab_size;
    EXPECT_THROW(forward_loss(params, spec, b), ValidationError);
    Batch longb;
    longb.sequences.push_back(make_sequence(std::string(30, 'a'), "b"));
    EXPECT_THROW(forward_loss(params, spec, longb), ValidationError);
}

TEST(ForwardLoss, Deterministic) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto b = lwaft::testing::random_token_batch(spec, 3, 12, 5);
    const double a = forward_loss(params, spec, b).loss;
    const double c = forward_loss(params, spec, b).loss;
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a), std::bit_cast<std::uint64_t>(c));
}

TEST(Backward, DeadPathsHaveZeroGradient) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    Batch b;
    b.sequences.push_back(make_sequence("ab>", "ba"));
    auto fwd = forward_loss(params, spec, b);
    const auto g = backward(fwd.cache);
    // positions past the sequence and tokens never seen feed nothing
    const auto pos = g.values("embed.pos");
    const auto D = static_cast<std::size_t>(spec.model_dim);
    for (std::size_t j = b.sequences[0].tokens.size() * D; j < pos.size(); ++j) {
        ASSERT_EQ(pos[j], 0.0);
    }
    const auto tok = g.values("embed.tok");
    const auto z = static_cast<std::size_t>(vocab::encode_char('z'));
    for (std::size_t j = 0; j < D; ++j) {
        ASSERT_EQ(tok[z * D + j], 0.0);
    }
}

TEST(Backward, StaleCacheRejected) {
    const auto spec = small_transducer();
    auto params = build_model(spec);
    Batch b;
    b.sequences.push_back(make_sequence("ab>", "ba"));
    auto fwd = forward_loss(params, spec, b);
    params.mutable_values(0)[0] += 1.0;
    EXPECT_THROW(backward(fwd.cache), StaleCacheError);
}

TEST(Backward, DuplicatedBatchLeavesLossAndGradientsUnchanged) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto b = lwaft::testing::random_token_batch(spec, 2, 10, 11);
    auto doubled = b;
    doubled.sequences.insert(doubled.sequences.end(), b.sequences.begin(), b.sequences.end());
    auto f1 = forward_loss(params, spec, b);
    auto f2 = forward_loss(params, spec, doubled);
    EXPECT_NEAR(f1.loss, f2.loss, 1e-14);
    const auto g1 = backward(f1.cache);
    const auto g2 = backward(f2.cache);
    for (std::size_t l = 0; l < g1.num_layers(); ++l) {
        for (std::size_t j = 0; j < g1.size(l); ++j) {
            ASSERT_NEAR(g1.values(l)[j], g2.values(l)[j], 1e-14 + 1e-12 * std::abs(g1.values(l)[j]));
        }
    }
}

TEST(GradCheck, MlpSmoke) {
    const auto spec = ModelSpec::mlp_smoke(8, 4, 2, 3);
    const auto params = build_model(spec);
    const auto b = lwaft::testing::separable_dense(16, 8, 0.0, 4);
    EXPECT_LT(grad_check(params, spec, b, 1e-5), 1e-6);
}

TEST(GradCheck, SeqTransducerTwoLayersDim16) {
    const auto spec = small_transducer(16, 2, 4, 24, 9);
    const auto params = build_model(spec);
    const auto b = lwaft::testing::random_token_batch(spec, 2, 14, 21);
    EXPECT_LT(grad_check(params, spec, b, 1e-5, 200, 1), 1e-5);
}

TEST(GradCheck, ZeroStepRejected) {
    const auto spec = ModelSpec::mlp_smoke(8, 4, 2);
    const auto b = lwaft::testing::separable_dense(4, 8, 0.0, 4);
    EXPECT_THROW(grad_check(build_model(spec), spec, b, 0.0), ValidationError);
}

TEST(ApplyUpdate, MaskIsHadamardProduct) {
    ParamStore p;
    p.add_layer("w", {1.0, 2.0, 3.0});
    GradStore masked_grad;
    masked_grad.add_layer("w", {0.3, -0.2, 0.7});
    GradStore effective;
    effective.add_layer("w", {0.3, 0.0, 0.7});
    MaskPlan mask = MaskPlan::none_of(p);
    mask.layers[0].unfrozen = {0, 2};

    auto a = p;
    OptimState sa(a, OptimConfig{}, 10);
    apply_update(a, masked_grad, sa, 0, &mask);
    auto b = p;
    OptimState sb(b, OptimConfig{}, 10);
    apply_update(b, effective, sb, 0);

    EXPECT_EQ(a.values(0)[0], b.values(0)[0]);
    EXPECT_EQ(a.values(0)[2], b.values(0)[2]);
    EXPECT_EQ(a.values(0)[1], 2.0);
    EXPECT_EQ(sa.m.values(0)[1], 0.0);
    EXPECT_EQ(sa.v.values(0)[1], 0.0);
}

TEST(ApplyUpdate, AllOnesMaskMatchesUnmasked) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto b = lwaft::testing::random_token_batch(spec, 2, 10, 3);
    auto fwd = forward_loss(params, spec, b);
    const auto g = backward(fwd.cache);
    const auto ones = MaskPlan::all_of(params);
    auto x = params;
    auto y = params;
    OptimState sx(x, OptimConfig{}, 5);
    OptimState sy(y, OptimConfig{}, 5);
    for (int step = 0; step < 3; ++step) {
        apply_update(x, g, sx, step, &ones);
        apply_update(y, g, sy, step);
    }
    EXPECT_TRUE(x.bit_equal(y));
}

TEST(ApplyUpdate, AllZerosMaskFreezesEverything) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto b = lwaft::testing::random_token_batch(spec, 2, 10, 3);
    auto fwd = forward_loss(params, spec, b);
    const auto g = backward(fwd.cache);
    const auto zeros = MaskPlan::none_of(params);
    auto x = params;
    OptimState s(x, OptimConfig{}, 100);
    for (int step = 0; step < 100; ++step) {
        apply_update(x, g, s, step, &zeros);
    }
    EXPECT_TRUE(x.bit_equal(params));
}

TEST(ApplyUpdate, LayoutMismatchAndNonFiniteGradient) {
    ParamStore p;
    p.add_layer("w", {1.0, 2.0});
    GradStore wrong;
    wrong.add_layer("v", {0.0, 0.0});
    OptimState s(p, OptimConfig{}, 4);
    EXPECT_THROW(apply_update(p, wrong, s, 0), ValidationError);
    GradStore bad;
    bad.add_layer("w", {0.1, std::nan("")});
    try {
        apply_update(p, bad, s, 3);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.step(), 3);
    }
    EXPECT_EQ(p.values(0)[0], 1.0);
}

TEST(Schedule, WarmupThenCosine) {
    OptimConfig cfg;
    cfg.warmup_ratio = 0.1;
    EXPECT_NEAR(learning_rate_at(cfg, 0, 100), cfg.learning_rate / 10, 1e-15);
    EXPECT_NEAR(learning_rate_at(cfg, 9, 100), cfg.learning_rate, 1e-15);
    EXPECT_NEAR(learning_rate_at(cfg, 10, 100), cfg.learning_rate, 1e-15);
    EXPECT_NEAR(learning_rate_at(cfg, 55, 100), cfg.learning_rate * 0.5, 1e-15);
    EXPECT_LT(learning_rate_at(cfg, 99, 100), 1e-3 * cfg.learning_rate);
    cfg.schedule = Schedule::constant;
    EXPECT_EQ(learning_rate_at(cfg, 80, 100), cfg.learning_rate);
    cfg.warmup_ratio = 1.0;
    EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Train, FrozenAllMaskKeepsInitialParams) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto data = lwaft::testing::random_token_batch(spec, 8, 10, 2);
    const auto zeros = MaskPlan::none_of(params);
    OptimConfig cfg;
    cfg.batch_size = 4;
    const auto out = train(params, spec, data, cfg, &zeros, 1);
    EXPECT_TRUE(out.params.bit_equal(params));
}

TEST(Train, SameInputsSameLosses) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto data = lwaft::testing::random_token_batch(spec, 8, 10, 2);
    OptimConfig cfg;
    cfg.batch_size = 3;
    cfg.epochs = 2;
    const auto a = train(params, spec, data, cfg, nullptr, 5);
    const auto b = train(params, spec, data, cfg, nullptr, 5);
    ASSERT_EQ(a.log.records.size(), b.log.records.size());
    EXPECT_EQ(a.log.to_ndjson(), b.log.to_ndjson());
    EXPECT_TRUE(a.params.bit_equal(b.params));
    for (std::size_t i = 1; i < a.log.records.size(); ++i) {
        EXPECT_GT(a.log.records[i].step, a.log.records[i - 1].step);
    }
}

TEST(Train, MlpSmokeSeparatesLinearlySeparableSet) {
    const auto spec = ModelSpec::mlp_smoke(8, 4, 2, 1);
    const auto data = lwaft::testing::separable_dense(64, 8, 0.1, 17);
    OptimConfig cfg;
    cfg.learning_rate = 5e-2;
    cfg.batch_size = 16;
    cfg.epochs = 50; // 4 steps per epoch, 200 steps
    cfg.weight_decay = 0.0;
    const auto out = train(build_model(spec), spec, data, cfg, nullptr, 3);
    EXPECT_EQ(out.log.records.size(), 200u);
    std::size_t correct = 0;
    for (const auto& ex : data.dense) {
        correct += argmax_class(out.params, spec, ex) == ex.label ? 1 : 0;
    }
    EXPECT_EQ(correct, data.dense.size());
}

TEST(Decode, ZeroMaxLenIsEmpty) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto prompt = vocab::encode("abc>");
    EXPECT_EQ(decode_greedy(params, spec, prompt, 0), "");
}

TEST(Decode, EndBiasedHeadStopsImmediately) {
    const auto spec = small_transducer();
    auto params = build_model(spec);
    params.mutable_values(*params.find("head.b"))[vocab::end] = 100.0;
    const auto prompt = vocab::encode("abc>");
    EXPECT_EQ(decode_greedy(params, spec, prompt, 10), "");
}

TEST(Decode, PromptTooLong) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto prompt = vocab::encode(std::string(24, 'a'));
    EXPECT_THROW(decode_greedy(params, spec, prompt, 3), ValidationError);
}

TEST(Decode, IncrementalLogitsMatchFullForward) {
    const auto spec = small_transducer();
    const auto params = build_model(spec);
    const auto seq = make_sequence("hello>", "wor");
    IncrementalDecoder dec(params, spec);
    std::vector<std::vector<double>> inc;
    for (int t : seq.tokens) {
        inc.push_back(dec.step(t));
    }
    // loss on a PAD target at position t + 1 is -log softmax(logits_t)[PAD]
    for (std::size_t t = 0; t < inc.size(); ++t) {
        auto logits = inc[t];
        detail::softmax_inplace(logits.data(), logits.size());
        Batch one;
        TokenSequence s;
        s.tokens.assign(seq.tokens.begin(), seq.tokens.begin() + static_cast<long>(t) + 1);
        s.tokens.push_back(0);
        s.target.assign(s.tokens.size(), 0);
        s.target.back() = 1;
        one.sequences.push_back(s);
        const double loss = forward_loss(params, spec, one).loss;
        EXPECT_NEAR(-std::log(logits[0]), loss, 1e-10);
    }
}

TEST(Decode, MemorizesSingleOverfitPair) {
    auto spec = small_transducer(16, 1, 2, 24, 4);
    const auto params = build_model(spec);
    Batch data;
    data.sequences.push_back(make_sequence("key7>", "val42"));
    OptimConfig cfg;
    cfg.batch_size = 1;
    cfg.epochs = 150;
    cfg.schedule = Schedule::constant;
    const auto out = train(params, spec, data, cfg, nullptr, 1);
    EXPECT_EQ(decode_greedy(out.params, spec, vocab::encode("key7>"), 10), "val42");
}
