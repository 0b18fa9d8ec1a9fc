#include <doctest.h>

#include <cmath>
#include <vector>

#include "ett/grad_check.hpp"
#include "ett/rng.hpp"
#include "ett/tokenizer.hpp"

using namespace ett;

namespace {

Tensor random_images(std::uint64_t seed, std::int64_t b, std::int64_t size) {
    Rng rng(seed);
    std::vector<Real> v(static_cast<std::size_t>(b * size * size * 3));
    for (auto& x : v) x = static_cast<Real>(rng.uniform() * 2 - 1);
    return Tensor::from({b, size, size, 3}, std::move(v));
}

void fill(Tensor t, Real value) {
    for (auto& v : t.mutable_values()) v = value;
}

void set_identity(Linear l) {
    fill(l.weight, 0);
    const auto n = l.weight.dim(0);
    for (std::int64_t i = 0; i < n; ++i) l.weight.mutable_values()[static_cast<std::size_t>(i * n + i)] = 1;
    if (l.bias.defined()) fill(l.bias, 0);
}

struct Small {
    ParamStore store{5};
    TokenizerConfig cfg{8, 4, 8, 1, 4, 6};
    TokenizerModel model{store, cfg};
    QuantizerConfig qcfg;
    Codebook cb;
    Small() {
        qcfg.codebook_size = 16;
        qcfg.code_dim = 4;
        cb = Codebook::create(store, qcfg);
    }
};

}  // namespace

TEST_CASE("encode and decode shapes") {
    ParamStore store(1);
    TokenizerModel m(store, TokenizerConfig{32, 4, 16, 1, 8, 8});
    Tensor f = m.encode(random_images(1, 2, 32));
    CHECK(f.shape() == Shape{2, 8, 8, 8});
    CHECK(m.decode(f).shape() == Shape{2, 32, 32, 3});
}

TEST_CASE("indivisible image sizes name H, W and s") {
    ParamStore store(1);
    TokenizerModel m(store, TokenizerConfig{32, 4, 16, 1, 8, 8});
    try {
        m.encode(random_images(1, 1, 30));
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("H=30") != std::string::npos);
        CHECK(msg.find("W=30") != std::string::npos);
        CHECK(msg.find("s=4") != std::string::npos);
    }
    CHECK_THROWS_AS(m.decode(Tensor::zeros({1, 8, 8, 5})), ShapeError);
}

TEST_CASE("zero output projection gives zero features") {
    Small s;
    fill(s.model.encoder_out().weight, 0);
    fill(s.model.encoder_out().bias, 0);
    Tensor f = s.model.encode(Tensor::zeros({1, 8, 8, 3}));
    for (Real v : f.values()) CHECK(v == 0);
}

TEST_CASE("identity weights make decode(encode(x)) exact on one patch") {
    ParamStore store(2);
    TokenizerModel m(store, TokenizerConfig{2, 2, 12, 0, 12, 4});
    set_identity(m.encoder_in());
    set_identity(m.encoder_out());
    set_identity(m.decoder_in());
    set_identity(m.decoder_out());
    Tensor x = random_images(3, 1, 2);
    Tensor y = m.decode(m.encode(x));
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("encode and decode match finite differences") {
    Small s;
    Tensor images = random_images(9, 2, 8);
    Tensor target = random_images(10, 2, 8);
    std::vector<Tensor> enc, dec;
    for (const auto& p : s.store.params()) {
        if (p.group == Group::encoder) enc.push_back(p.tensor);
        if (p.group == Group::decoder) dec.push_back(p.tensor);
    }
    enc.push_back(images);
    const auto re = grad_check([&](std::span<const Tensor>) { return mse(s.model.encode(images), Tensor::zeros({2, 2, 2, 4})); },
                               enc, 1e-6);
    CHECK(re.max_rel_error < 1e-3);

    Rng rng(12);
    std::vector<Real> zv(2 * 2 * 2 * 4);
    for (auto& v : zv) v = static_cast<Real>(rng.normal());
    Tensor z = Tensor::from({2, 2, 2, 4}, zv);
    dec.push_back(z);
    const auto rd = grad_check([&](std::span<const Tensor>) { return mse(s.model.decode(z), target); }, dec, 1e-6);
    CHECK(rd.max_rel_error < 1e-3);
}

TEST_CASE("the weighted loss identity") {
    LossBreakdown b;
    b.l_rec = 0.4;
    b.l_quant = 0.1;
    b.l_gan = 0.2;
    b.l_entropy = -2.0;
    VqWeights w;
    w.lambda_gan = 0.1;
    w.lambda_entropy = 0.05;
    b.set_vq_from_terms(w);
    CHECK(b.l_vq == doctest::Approx(0.42).epsilon(1e-12));
    CHECK(b.l_lpips == 0);
    CHECK_FALSE(b.lpips_supported);
}

TEST_CASE("vq_loss breakdown satisfies the identity and matches the graph value") {
    Small s;
    Tensor images = random_images(4, 3, 8);
    for (bool gan : {false, true}) {
        VqWeights w;
        w.gan_active = gan;
        const auto out = vq_loss(images, s.model, s.cb, s.qcfg, w);
        const auto& b = out.breakdown;
        const double expect = b.l_rec + b.l_quant + 0.0 + w.lambda_gan * b.l_gan + w.lambda_entropy * b.l_entropy;
        CHECK(std::abs(b.l_vq - expect) <= 1e-6 * std::abs(expect));
        CHECK(out.l_vq.item() == doctest::Approx(b.l_vq).epsilon(1e-9));
        CHECK(b.gan_active == gan);
        if (!gan) CHECK(b.l_gan == 0);
        CHECK(out.reconstruction.shape() == images.shape());
    }
}

TEST_CASE("a perfect reconstruction has zero reconstruction loss") {
    Tensor x = random_images(5, 2, 8);
    CHECK(mse(x, x).item() == 0);
    Tensor y = random_images(6, 2, 8);
    CHECK(mse(x, y).item() == mse(y, x).item());
    CHECK(mse(x, y).item() > 0);
}

TEST_CASE("with the GAN off no discriminator parameter gets gradient") {
    Small s;
    s.store.set_trainable({kAllGroups.begin(), kAllGroups.end()});
    s.store.zero_grad();
    VqWeights w;
    w.gan_active = false;
    const auto out = vq_loss(random_images(7, 2, 8), s.model, s.cb, s.qcfg, w);
    backward(out.l_vq);
    for (const auto& p : s.store.params()) {
        if (p.group != Group::discriminator) continue;
        for (Real g : p.tensor.grad()) CHECK(g == 0);
    }
    w.gan_active = true;
    s.store.zero_grad();
    backward(vq_loss(random_images(7, 2, 8), s.model, s.cb, s.qcfg, w).l_vq);
    double mx = 0;
    for (const auto& p : s.store.params()) {
        if (p.group != Group::discriminator) continue;
        for (Real g : p.tensor.grad()) mx = std::max(mx, std::abs(static_cast<double>(g)));
    }
    CHECK(mx > 0);
}

TEST_CASE("hinge loss cases") {
    const std::vector<Real> pos(8, 2), neg(8, -2), zero(8, 0);
    CHECK(hinge_discriminator_loss(pos, neg) == 0);
    CHECK(hinge_discriminator_loss(zero, zero) == 2);
}

TEST_CASE("discriminator step") {
    Small s;
    DiscriminatorConfig dc;
    LecamState st;
    Tensor real = random_images(8, 2, 8);
    Tensor fake = random_images(9, 2, 8);
    CHECK_THROWS_AS(discriminator_loss(real, fake, s.model, st, dc), Error);

    dc.gan_active = true;
    const auto out = discriminator_loss(real, fake, s.model, st, dc);
    CHECK(out.loss.item() == doctest::Approx(out.hinge + dc.lecam_weight * out.lecam).epsilon(1e-9));
    CHECK(s.model.discriminate(real).shape() == Shape{2, 4});

    // The fake batch is detached.
    Tensor fake_leaf = random_images(9, 2, 8);
    fake_leaf.set_requires_grad(true);
    LecamState st2;
    backward(discriminator_loss(real, fake_leaf, s.model, st2, dc).loss);
    if (fake_leaf.has_grad()) {
        for (Real g : fake_leaf.grad()) CHECK(g == 0);
    }
}

TEST_CASE("LeCAM EMAs converge geometrically to constant inputs") {
    Small s;
    DiscriminatorConfig dc;
    dc.gan_active = true;
    LecamState st;
    Tensor real = random_images(8, 2, 8);
    Tensor fake = random_images(9, 2, 8);
    const double mr = mean(s.model.discriminate(real)).item();
    double prev_gap = std::abs(mr);
    for (int i = 0; i < 50; ++i) {
        discriminator_loss(real, fake, s.model, st, dc);
        const double gap = std::abs(st.ema_real - mr);
        CHECK(gap == doctest::Approx(0.99 * prev_gap).epsilon(1e-9));
        prev_gap = gap;
    }
}

TEST_CASE("image tensor round trip") {
    Tensor x = random_images(13, 3, 8);
    const auto images = tensor_to_images(x);
    CHECK(images.size() == 3);
    Tensor y = images_to_tensor(images);
    CHECK(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(static_cast<float>(x.values()[i]) == static_cast<float>(y.values()[i]));
}
