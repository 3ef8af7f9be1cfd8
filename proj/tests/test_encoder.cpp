#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "ctxopt/text_encoder.hpp"
#include "gradcheck.hpp"

using namespace ctxopt;

namespace {

EncoderConfig toy_config(std::size_t vocab) {
    EncoderConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 16;
    c.embed_dim = 8;
    c.seq_len = 8;
    c.vocab_size = vocab;
    return c;
}

Vocabulary toy_vocab() {
    return Vocabulary::build({"a photo of a dog, a photo of a cat"},
                             Vocabulary::kNumByteTokens + Vocabulary::kNumSpecials + 24);
}

} // namespace

TEST_CASE("init_frozen is deterministic and frozen") {
    EncoderConfig cfg = toy_config(300);
    EncoderWeights a = EncoderWeights::init_frozen(5, cfg);
    EncoderWeights b = EncoderWeights::init_frozen(5, cfg);
    CHECK(a.fingerprint() == b.fingerprint());
    EncoderWeights c = EncoderWeights::init_frozen(6, cfg);
    CHECK(a.fingerprint() != c.fingerprint());

    bool any_trainable = false;
    a.for_each_tensor([&](const std::string&, const Tensor& t) {
        any_trainable = any_trainable || t.requires_grad();
    });
    CHECK(!any_trainable);
}

TEST_CASE("init_frozen validates config") {
    EncoderConfig cfg = toy_config(300);
    cfg.d_model = 32;
    cfg.heads = 5;
    CHECK_THROWS_AS(EncoderWeights::init_frozen(1, cfg), ConfigError);
    cfg = toy_config(0);
    CHECK_THROWS_AS(EncoderWeights::init_frozen(1, cfg), ConfigError);
}

TEST_CASE("weight file round trips bit-exactly") {
    EncoderWeights w = EncoderWeights::init_frozen(42, toy_config(280));
    const std::string path = "encoder_roundtrip_test.ctxw";
    w.save(path);
    EncoderWeights loaded = EncoderWeights::load(path);
    CHECK(loaded.fingerprint() == w.fingerprint());
    CHECK(loaded.config() == w.config());

    // byte-identical when re-saved
    const std::string path2 = "encoder_roundtrip_test2.ctxw";
    loaded.save(path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("truncated weight file is rejected") {
    EncoderWeights w = EncoderWeights::init_frozen(42, toy_config(280));
    const std::string path = "encoder_trunc_test.ctxw";
    w.save(path);
    std::string raw;
    {
        std::ifstream f(path, std::ios::binary);
        raw.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(raw.data(), static_cast<std::streamsize>(raw.size() / 2));
    }
    CHECK_THROWS_AS(EncoderWeights::load(path), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("encode_sequence contract checks") {
    EncoderWeights w = EncoderWeights::init_frozen(1, toy_config(280));
    Rng rng(9);
    Tensor embeds = Tensor::randn({8, 16}, rng, 0.02f);
    CHECK(encode_sequence(embeds, 3, w).vector.shape() == Shape{8});
    CHECK_THROWS_AS(encode_sequence(embeds, 8, w), ContractError);
    Tensor bad = Tensor::randn({7, 16}, rng, 0.02f);
    CHECK_THROWS_AS(encode_sequence(bad, 3, w), ShapeError);
}

TEST_CASE("pad rows after eos cannot influence the feature") {
    EncoderWeights w = EncoderWeights::init_frozen(3, toy_config(280));
    Rng rng(4);
    Tensor embeds = Tensor::randn({8, 16}, rng, 0.02f);
    const std::size_t eos = 4;
    TextFeature base = encode_sequence(embeds, eos, w);

    Tensor perturbed = Tensor::from_data(embeds.shape(), embeds.data());
    for (std::size_t j = 0; j < 16; ++j) perturbed.mutable_data()[6 * 16 + j] += 2.0f;
    TextFeature moved = encode_sequence(perturbed, eos, w);
    CHECK(base.vector.data() == moved.vector.data()); // bitwise equal

    // a row at/before the EOS does influence it
    Tensor perturbed2 = Tensor::from_data(embeds.shape(), embeds.data());
    perturbed2.mutable_data()[2 * 16 + 1] += 0.5f;
    TextFeature moved2 = encode_sequence(perturbed2, eos, w);
    CHECK(base.vector.data() != moved2.vector.data());
}

TEST_CASE("feature depends on which row is read") {
    EncoderWeights w = EncoderWeights::init_frozen(3, toy_config(280));
    Rng rng(4);
    Tensor embeds = Tensor::randn({8, 16}, rng, 0.02f);
    TextFeature at4 = encode_sequence(embeds, 4, w);
    TextFeature at3 = encode_sequence(embeds, 3, w);
    TextFeature at5 = encode_sequence(embeds, 5, w);
    CHECK(at4.vector.data() != at3.vector.data());
    CHECK(at4.vector.data() != at5.vector.data());
}

TEST_CASE("gradient reaches only rows at or before eos") {
    EncoderWeights w = EncoderWeights::init_frozen(3, toy_config(280));
    Rng rng(4);
    Tensor embeds = Tensor::randn({8, 16}, rng, 0.02f, /*requires_grad=*/true);
    const std::size_t eos = 4;
    Tape tape;
    TextFeature f = encode_sequence(embeds, eos, w);
    backward(sum(f.vector));
    const auto& g = embeds.grad();
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 16; ++j) {
            if (i <= eos) before += std::fabs(g[i * 16 + j]);
            else after += std::fabs(g[i * 16 + j]);
        }
    CHECK(before > 0.0);
    CHECK(after == 0.0);

    // weights stayed grad-free
    w.for_each_tensor([&](const std::string&, const Tensor& t) { CHECK(!t.has_grad()); });
}

TEST_CASE("end-to-end encoder gradient matches finite differences") {
    EncoderWeights w = EncoderWeights::init_frozen(17, toy_config(280));
    Rng rng(31);
    Tensor embeds = Tensor::randn({8, 16}, rng, 0.5f, /*requires_grad=*/true);
    Tensor planted = Tensor::randn({8}, rng, 1.0f);
    const double err = gradcheck::max_rel_err(
        [&] { return dot(encode_sequence(embeds, 5, w).vector, planted); }, {embeds});
    INFO("rel err ", err);
    CHECK(err < 1e-3);
}

TEST_CASE("encode_text composes the pipeline") {
    Vocabulary vocab = toy_vocab();
    EncoderConfig cfg = toy_config(vocab.size());
    cfg.seq_len = 16;
    EncoderWeights w = EncoderWeights::init_frozen(11, cfg);

    TextFeature direct = encode_text("a photo of a dog", vocab, w);
    CHECK(direct.vector.shape() == Shape{8});
    CHECK(direct.source == "a photo of a dog");

    TokenSequence seq = encode("a photo of a dog", vocab, cfg.seq_len);
    Tensor embeds = embed_lookup(seq, w.token_embedding());
    TextFeature manual = encode_sequence(embeds, seq.eos_index, w);
    CHECK(direct.vector.data() == manual.vector.data());

    // deterministic, and whitespace variants share the tokenization
    TextFeature again = encode_text("a photo of a dog", vocab, w);
    CHECK(direct.vector.data() == again.vector.data());
    TextFeature spaced = encode_text("a  photo   of a dog", vocab, w);
    CHECK(direct.vector.data() == spaced.vector.data());
}

TEST_CASE("encode_text rejects mismatched vocabulary") {
    Vocabulary vocab = toy_vocab();
    EncoderConfig cfg = toy_config(vocab.size() + 7);
    EncoderWeights w = EncoderWeights::init_frozen(11, cfg);
    CHECK_THROWS_AS(encode_text("a dog", vocab, w), ConfigError);
}
