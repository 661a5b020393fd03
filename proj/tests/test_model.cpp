#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "upl/checkpoint.hpp"
#include "upl/model.hpp"
#include "upl/optim.hpp"
#include "upl/transforms.hpp"

using namespace upl;
using upl::test::bitwise_equal;
using upl::test::random_tensor;

namespace {

// One train-mode forward so running statistics become available, then eval.
SegModel trained_single(std::uint64_t seed = 1, ArchConfig arch = {}) {
    SeededRng init(seed), data(seed + 100);
    SegModel m = SegModel::create(arch, 3, init);
    (void)m.forward_head(random_tensor({2, 1, 16, 16}, data, 0.0, 1.0), 0, Mode::train, nullptr, nullptr);
    return m;
}

// Independent count: conv weights (no bias) plus gamma/beta per block.
std::size_t expected_params(const ArchConfig& a, int classes, int heads) {
    auto block = [&](std::size_t cin, std::size_t cout) {
        return cin * cout * a.kernel * a.kernel + 2 * cout;
    };
    std::size_t enc = 0, head = 0;
    std::size_t cin = a.in_channels;
    for (int l = 0; l <= a.levels; ++l) {
        const std::size_t c = static_cast<std::size_t>(a.base_channels) << l;
        enc += block(cin, c) + block(c, c);
        cin = c;
    }
    for (int l = 0; l < a.levels; ++l) {
        const std::size_t c = static_cast<std::size_t>(a.base_channels) << l;
        head += block(2 * c, c) + block(2 * c, c) + block(c, c);
    }
    head += static_cast<std::size_t>(classes) * a.base_channels + classes;
    return enc + heads * head;
}

}  // namespace

TEST(Grow, HeadsAreBitwiseCopies) {
    const SegModel single = trained_single();
    const SegModel m = grow(single, 4);
    ASSERT_EQ(m.head_count(), 4);
    EXPECT_TRUE(m.dropout_gates());
    const auto ps = m.parameters();
    const auto base = single.parameters();
    for (const auto& p : ps) {
        const auto dot = p.name.find('.');
        if (p.name.rfind("head", 0) != 0) continue;
        const std::string suffix = p.name.substr(dot);
        const auto it = std::find_if(base.begin(), base.end(), [&](const NamedParam& q) { return q.name == "head0" + suffix; });
        ASSERT_NE(it, base.end()) << p.name;
        EXPECT_TRUE(bitwise_equal(p.tensor.data(), it->tensor.data())) << p.name;
    }
    // Encoder untouched and storage not shared.
    for (const auto& p : ps) {
        if (p.name.rfind("enc", 0) != 0) continue;
        const auto it = std::find_if(base.begin(), base.end(), [&](const NamedParam& q) { return q.name == p.name; });
        EXPECT_TRUE(bitwise_equal(p.tensor.data(), it->tensor.data()));
        EXPECT_NE(p.tensor.data().data(), it->tensor.data().data());
    }
}

TEST(Grow, KOneIsStructurallyIdentical) {
    const SegModel single = trained_single();
    const SegModel m = grow(single, 1);
    EXPECT_EQ(m.head_count(), 1);
    const auto a = single.parameters(), b = m.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    }
}

TEST(Grow, Errors) {
    const SegModel single = trained_single();
    EXPECT_THROW(grow(single, 0), std::invalid_argument);
    EXPECT_THROW(grow(single, kMaxHeads + 1), std::invalid_argument);
    EXPECT_THROW(grow(grow(single, 2), 2), std::invalid_argument);
}

TEST(Grow, FreshHeadsAgreeInEvalAndAverageToSingle) {
    SegModel single = trained_single();
    SegModel m = grow(single, 4);
    SeededRng rng(5);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    const Tensor ref = single.forward_head(x, 0, Mode::eval, nullptr, nullptr);
    std::vector<Tensor> outs;
    for (int k = 0; k < 4; ++k) {
        outs.push_back(m.forward_head(x, k, Mode::eval, nullptr, nullptr));
        EXPECT_TRUE(bitwise_equal(outs.back().data(), ref.data())) << "head " << k;
    }
    EXPECT_TRUE(bitwise_equal(average(outs).data(), ref.data()));
}

TEST(ForwardHead, ProbabilitiesSumToOne) {
    SegModel m = grow(trained_single(), 2);
    SeededRng rng(6), drop(7);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng, -1.0, 2.0);
    for (Mode mode : {Mode::eval, Mode::train}) {
        const Tensor p = m.forward_head(x, 1, mode, &drop, nullptr);
        ASSERT_EQ(p.shape(), (Shape{2, 3, 16, 16}));
        for (int b = 0; b < 2; ++b)
            for (int i = 0; i < 256; ++i) {
                double s = 0;
                for (int c = 0; c < 3; ++c) s += p[(static_cast<std::size_t>(b) * 3 + c) * 256 + i];
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(ForwardHead, TrainModeDropoutMakesHeadsDiffer) {
    SegModel m = grow(trained_single(), 2);
    SeededRng rng(8);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    SeededRng d0(101), d1(202);
    const Tensor a = m.forward_head(x, 0, Mode::train, &d0, nullptr);
    const Tensor b = m.forward_head(x, 1, Mode::train, &d1, nullptr);
    EXPECT_GT(test::max_abs_diff(a.data(), b.data()), 0.0);
    // Gates off: same input, same weights, train mode gives identical heads.
    m.set_dropout_gates(false);
    const Tensor c = m.forward_head(x, 0, Mode::train, &d0, nullptr);
    const Tensor d = m.forward_head(x, 1, Mode::train, &d1, nullptr);
    EXPECT_TRUE(bitwise_equal(c.data(), d.data()));
}

TEST(ForwardHead, Errors) {
    SegModel m = grow(trained_single(), 2);
    SeededRng drop(1);
    EXPECT_THROW(m.forward_head(Tensor(Shape{1, 1, 10, 16}), 0, Mode::eval, nullptr, nullptr), ShapeError);
    EXPECT_THROW(m.forward_head(Tensor(Shape{1, 2, 16, 16}), 0, Mode::eval, nullptr, nullptr), ShapeError);
    EXPECT_THROW(m.forward_head(Tensor(Shape{1, 1, 16, 16}), 2, Mode::eval, nullptr, nullptr), std::out_of_range);
    EXPECT_THROW(m.forward_head(Tensor(Shape{2, 1, 16, 16}), 0, Mode::train, nullptr, nullptr), std::invalid_argument);
}

TEST(ForwardHead, EvalIsPure) {
    SegModel m = grow(trained_single(), 3);
    SeededRng rng(9);
    const Tensor x = random_tensor({1, 1, 16, 16}, rng);
    const Tensor a = m.forward_head(x, 2, Mode::eval, nullptr, nullptr);
    const Tensor b = m.forward_head(x, 2, Mode::eval, nullptr, nullptr);
    EXPECT_TRUE(bitwise_equal(a.data(), b.data()));
}

TEST(Parameters, CountsMatchFormula) {
    for (const ArchConfig arch : {ArchConfig{}, ArchConfig{1, 4, 3, 0.5f, 1}, ArchConfig{3, 2, 3, 0.5f, 1}}) {
        SeededRng init(1);
        const SegModel single = SegModel::create(arch, 3, init);
        EXPECT_EQ(single.parameter_count(), expected_params(arch, 3, 1));
        for (int k : {1, 4}) {
            const SegModel m = grow(single, k);
            EXPECT_EQ(m.parameter_count(), expected_params(arch, 3, k));
        }
    }
}

TEST(Parameters, BnAffineGroup) {
    SegModel m = grow(trained_single(), 4);
    const auto all = m.parameters(ParamGroup::all);
    const auto bn = m.parameters(ParamGroup::bn_affine_only);
    std::size_t channels = 0;
    for (const auto& b : m.bn_layers()) channels += static_cast<std::size_t>(b.state->channels());
    EXPECT_EQ(m.parameter_count(ParamGroup::bn_affine_only), 2 * channels);
    std::set<std::string> names;
    for (const auto& p : all) names.insert(p.name);
    EXPECT_EQ(names.size(), all.size());
    for (const auto& p : bn) {
        EXPECT_TRUE(names.count(p.name)) << p.name;
        const bool affine = p.name.ends_with(".bn.gamma") || p.name.ends_with(".bn.beta");
        EXPECT_TRUE(affine) << p.name;
    }
    std::set<std::string> bn_names;
    for (const auto& p : bn) bn_names.insert(p.name);
    for (const auto& p : all) {
        if (bn_names.count(p.name)) continue;
        EXPECT_FALSE(p.name.ends_with(".gamma") || p.name.ends_with(".beta")) << p.name;
    }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    SegModel m = trained_single();
    auto params = m.parameters();
    std::vector<std::vector<float>> before;
    for (const auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    zero_grads(params);
    Adam opt(0.01f);
    for (int s = 0; s < 3; ++s) opt.step(params);
    for (std::size_t i = 0; i < params.size(); ++i) EXPECT_TRUE(bitwise_equal(params[i].tensor.data(), before[i]));
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // With bias correction the first update is lr * g / (|g| + eps).
    Tensor w(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f});
    w.set_requires_grad(true);
    std::vector<NamedParam> ps = {{"w", w}};
    auto g = w.mutable_grad();
    g[0] = 3.0f;
    g[1] = -0.25f;
    g[2] = 0.0f;
    Adam opt(0.1f);
    opt.step(ps);
    EXPECT_NEAR(w[0], 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-6);
    EXPECT_NEAR(w[1], -2.0 + 0.1 * 0.25 / (0.25 + 1e-8), 1e-6);
    EXPECT_EQ(w[2], 0.5f);
    EXPECT_THROW(Adam(-1.0f), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    SegModel m = grow(trained_single(3), 4);
    SeededRng rng(10);
    const Tensor x = random_tensor({1, 1, 16, 16}, rng);
    // A real optimizer state.
    auto params = m.parameters();
    {
        Tape tape;
        SeededRng drop(4);
        const Tensor p = m.forward_head(x, 1, Mode::train, &drop, &tape);
        tape.backward(sum(mul(p, p)));
    }
    Adam opt(1e-3f);
    opt.step(params);
    const CheckpointMeta meta{7, 42, 0.8125f};
    const auto bytes = checkpoint_save(m, &opt.state(), meta);
    Checkpoint ck = checkpoint_load(bytes);
    EXPECT_EQ(ck.meta, meta);
    EXPECT_EQ(ck.model.head_count(), 4);
    EXPECT_EQ(ck.model.arch(), m.arch());
    EXPECT_TRUE(ck.model.dropout_gates());
    EXPECT_EQ(ck.optimizer.step, opt.state().step);
    ASSERT_EQ(ck.optimizer.moments.size(), opt.state().moments.size());
    for (const auto& [name, mom] : opt.state().moments) {
        EXPECT_TRUE(bitwise_equal(ck.optimizer.moments.at(name).m, mom.m)) << name;
        EXPECT_TRUE(bitwise_equal(ck.optimizer.moments.at(name).v, mom.v)) << name;
    }
    const auto a = m.parameters(), b = ck.model.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i].tensor.data(), b[i].tensor.data())) << a[i].name;
    auto bna = m.bn_layers(), bnb = ck.model.bn_layers();
    for (std::size_t i = 0; i < bna.size(); ++i) {
        EXPECT_TRUE(bitwise_equal(bna[i].state->running_mean, bnb[i].state->running_mean));
        EXPECT_TRUE(bitwise_equal(bna[i].state->running_var, bnb[i].state->running_var));
        EXPECT_EQ(bna[i].state->has_stats, bnb[i].state->has_stats);
    }
    for (int k = 0; k < 4; ++k) {
        EXPECT_TRUE(bitwise_equal(m.forward_head(x, k, Mode::eval, nullptr, nullptr).data(),
                                  ck.model.forward_head(x, k, Mode::eval, nullptr, nullptr).data()));
    }
    // Saving the loaded model reproduces the bytes.
    EXPECT_EQ(checkpoint_save(ck.model, &ck.optimizer, ck.meta), bytes);
}

TEST(Checkpoint, CorruptionIsAnError) {
    SegModel m = trained_single();
    const auto bytes = checkpoint_save(m, nullptr, {});
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(checkpoint_load(bad), FormatError);
    bad = bytes;
    bad[4] = 9;  // version
    EXPECT_THROW(checkpoint_load(bad), FormatError);
    bad = bytes;
    bad[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(checkpoint_load(bad), FormatError);
    for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        const std::vector<std::uint8_t> trunc(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(checkpoint_load(trunc), FormatError) << cut;
    }
}

TEST(Checkpoint, ShapeDisagreementIsAnError) {
    // A level-1 model's checkpoint with its header patched to claim 8 base
    // channels no longer matches the stored tensors.
    SeededRng init(2);
    SegModel m = SegModel::create(ArchConfig{1, 4, 3, 0.5f, 1}, 2, init);
    auto bytes = checkpoint_save(m, nullptr, {});
    bytes[6 + 4] = 8;
    // Refresh the CRC so the shape check is what fails.
    const std::uint32_t crc = crc32_of(bytes.data() + 6, bytes.size() - 10);
    for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(crc >> (8 * i));
    try {
        checkpoint_load(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, GrowCommutesWithSaveLoad) {
    SegModel single = trained_single(4);
    SeededRng rng(11);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng);
    // Path A: save single, load, grow.
    SegModel a = grow(checkpoint_load(checkpoint_save(single, nullptr, {})).model, 3);
    // Path B: grow, save, load.
    SegModel grown = grow(single, 3);
    SegModel b = checkpoint_load(checkpoint_save(grown, nullptr, {})).model;
    for (int k = 0; k < 3; ++k) {
        EXPECT_TRUE(bitwise_equal(a.forward_head(x, k, Mode::eval, nullptr, nullptr).data(),
                                  b.forward_head(x, k, Mode::eval, nullptr, nullptr).data()));
    }
    // Same dropout streams give the same train-mode outputs on both paths.
    SeededRng da(5), db(5);
    EXPECT_TRUE(bitwise_equal(a.forward_head(x, 1, Mode::train, &da, nullptr).data(),
                              b.forward_head(x, 1, Mode::train, &db, nullptr).data()));
}
