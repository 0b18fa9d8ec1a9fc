#include "ett/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

ETT_NAMESPACE_BEGIN

namespace {

double fan_in_std(std::int64_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); }

std::vector<ResidualBlock> make_blocks(ParamStore& store, const std::string& prefix, Group group, std::int64_t dim,
                                       std::int64_t count) {
    std::vector<ResidualBlock> blocks;
    for (std::int64_t i = 0; i < count; ++i) {
        const std::string p = prefix + ".block" + std::to_string(i);
        blocks.push_back(ResidualBlock{make_layer_norm(store, p + ".norm", group, dim),
                                       make_linear(store, p + ".fc1", group, dim, 2 * dim, fan_in_std(dim)),
                                       make_linear(store, p + ".fc2", group, 2 * dim, dim, 0.5 * fan_in_std(2 * dim))});
    }
    return blocks;
}

void check_image_batch(const char* op, const Tensor& images, const TokenizerConfig& cfg) {
    if (images.rank() != 4 || images.dim(3) != 3) throw ShapeError(op, images.shape(), Shape{-1, cfg.image_size, cfg.image_size, 3});
    const auto h = images.dim(1);
    const auto w = images.dim(2);
    if (h % cfg.patch != 0 || w % cfg.patch != 0) {
        throw ShapeError(op, images.shape(), Shape{},
                         "H=" + std::to_string(h) + ", W=" + std::to_string(w) + " not divisible by s=" +
                             std::to_string(cfg.patch));
    }
}

}  // namespace

TokenizerModel::TokenizerModel(ParamStore& store, const TokenizerConfig& cfg) : cfg_(cfg) {
    if (cfg.patch <= 0 || cfg.image_size % cfg.patch != 0) {
        throw Error(ErrorCode::invalid_argument, "tokenizer: image size " + std::to_string(cfg.image_size) +
                                                      " not divisible by s=" + std::to_string(cfg.patch));
    }
    const std::int64_t pin = cfg.patch * cfg.patch * 3;
    const std::int64_t h = cfg.hidden;
    enc_in_ = make_linear(store, "encoder.patch_embed", Group::encoder, pin, h, fan_in_std(pin));
    enc_blocks_ = make_blocks(store, "encoder", Group::encoder, h, cfg.blocks);
    if (cfg.blocks > 0) enc_norm_ = make_layer_norm(store, "encoder.norm", Group::encoder, h);
    enc_out_ = make_linear(store, "encoder.out", Group::encoder, h, cfg.code_dim, fan_in_std(h));

    dec_in_ = make_linear(store, "decoder.in", Group::decoder, cfg.code_dim, h, fan_in_std(cfg.code_dim));
    dec_blocks_ = make_blocks(store, "decoder", Group::decoder, h, cfg.blocks);
    if (cfg.blocks > 0) dec_norm_ = make_layer_norm(store, "decoder.norm", Group::decoder, h);
    dec_out_ = make_linear(store, "decoder.out", Group::decoder, h, pin, fan_in_std(h));

    const std::int64_t dh = cfg.disc_hidden;
    disc_in_ = make_linear(store, "discriminator.in", Group::discriminator, pin, dh, fan_in_std(pin));
    disc_mid_ = make_linear(store, "discriminator.mid", Group::discriminator, dh, dh, fan_in_std(dh));
    disc_out_ = make_linear(store, "discriminator.out", Group::discriminator, dh, 1, fan_in_std(dh));
}

Tensor TokenizerModel::encode(const Tensor& images) const {
    check_image_batch("encode", images, cfg_);
    const auto b = images.dim(0);
    const auto gh = images.dim(1) / cfg_.patch;
    const auto gw = images.dim(2) / cfg_.patch;
    Tensor x = enc_in_(im2patch(images, cfg_.patch));
    for (const auto& blk : enc_blocks_) x = blk(x);
    if (enc_norm_.gamma.defined()) x = enc_norm_(x);
    return reshape(enc_out_(x), Shape{b, gh, gw, cfg_.code_dim});
}

Tensor TokenizerModel::decode(const Tensor& z) const {
    if (z.rank() != 4 || z.dim(3) != cfg_.code_dim) {
        throw ShapeError("decode", z.shape(), Shape{-1, grid(), grid(), cfg_.code_dim});
    }
    const auto b = z.dim(0);
    const auto gh = z.dim(1);
    const auto gw = z.dim(2);
    Tensor x = dec_in_(reshape(z, Shape{b, gh * gw, cfg_.code_dim}));
    for (const auto& blk : dec_blocks_) x = blk(x);
    if (dec_norm_.gamma.defined()) x = dec_norm_(x);
    return patch2im(dec_out_(x), gh * cfg_.patch, gw * cfg_.patch, 3, cfg_.patch);
}

Tensor TokenizerModel::discriminate(const Tensor& images) const {
    check_image_batch("discriminate", images, cfg_);
    const auto b = images.dim(0);
    Tensor x = gelu(disc_in_(im2patch(images, cfg_.patch)));
    x = gelu(disc_mid_(x));
    Tensor logits = disc_out_(x);
    return reshape(logits, Shape{b, -1});
}

Tensor images_to_tensor(std::span<const Image> images) {
    if (images.empty()) throw Error(ErrorCode::invalid_argument, "images_to_tensor: empty batch");
    const int h = images.front().height;
    const int w = images.front().width;
    Buffer values;
    values.reserve(images.size() * static_cast<std::size_t>(h * w * 3));
    for (const auto& img : images) {
        if (img.height != h || img.width != w) {
            throw ShapeError("images_to_tensor", Shape{h, w, 3}, Shape{img.height, img.width, 3});
        }
        for (float p : img.pixels) values.push_back(static_cast<Real>(p));
    }
    return Tensor::from(Shape{static_cast<std::int64_t>(images.size()), h, w, 3}, std::move(values));
}

std::vector<Image> tensor_to_images(const Tensor& t) {
    if (t.rank() != 4 || t.dim(3) != 3) throw ShapeError("tensor_to_images", t.shape(), Shape{-1, -1, -1, 3});
    const auto b = t.dim(0);
    const auto h = static_cast<int>(t.dim(1));
    const auto w = static_cast<int>(t.dim(2));
    const std::size_t per = static_cast<std::size_t>(h * w * 3);
    std::vector<Image> out;
    const auto v = t.values();
    for (std::int64_t i = 0; i < b; ++i) {
        Image img;
        img.height = h;
        img.width = w;
        img.pixels.assign(v.begin() + static_cast<std::ptrdiff_t>(i * per),
                          v.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        out.push_back(std::move(img));
    }
    return out;
}

void LossBreakdown::set_vq_from_terms(const VqWeights& w) {
    l_lpips = 0.0;
    lpips_supported = false;
    l_vq = l_rec + l_quant + l_lpips + w.lambda_gan * l_gan + w.lambda_entropy * l_entropy;
}

VqForward vq_loss(const Tensor& images, const TokenizerModel& model, const Codebook& codebook,
                  const QuantizerConfig& qcfg, const VqWeights& weights) {
    if (model.config().code_dim != codebook.dim) {
        throw ShapeError("vq_loss", Shape{model.config().code_dim}, Shape{codebook.dim}, "encoder D vs codebook D");
    }
    VqForward out;
    Tensor f = model.encode(images);
    out.quant = quantize(f, codebook, qcfg);
    out.reconstruction = model.decode(out.quant.z);
    out.l_rec = weights.rec == RecLoss::mse ? mse(out.reconstruction, images) : l1(out.reconstruction, images);

    Tensor total = add(out.l_rec, out.quant.l_quant);
    total = add(total, scale(out.quant.l_entropy, static_cast<Real>(weights.lambda_entropy)));
    if (weights.gan_active) {
        out.l_gan = scale(mean(model.discriminate(out.reconstruction)), Real(-1));
        total = add(total, scale(out.l_gan, static_cast<Real>(weights.lambda_gan)));
    }
    out.l_vq = total;

    LossBreakdown& bd = out.breakdown;
    bd.l_rec = out.l_rec.item();
    bd.l_quant = out.quant.l_quant.item();
    bd.l_entropy = out.quant.l_entropy.item();
    bd.l_gan = weights.gan_active ? static_cast<double>(out.l_gan.item()) : 0.0;
    bd.rec_active = bd.quant_active = bd.entropy_active = true;
    bd.gan_active = weights.gan_active;
    bd.set_vq_from_terms(weights);
    bd.total = bd.l_vq;
    return out;
}

double hinge_discriminator_loss(std::span<const Real> real_logits, std::span<const Real> fake_logits) {
    auto term = [](std::span<const Real> xs, double sign) {
        double acc = 0.0;
        for (Real x : xs) acc += std::max(0.0, 1.0 + sign * static_cast<double>(x));
        return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
    };
    return term(real_logits, -1.0) + term(fake_logits, 1.0);
}

DiscriminatorLoss discriminator_loss(const Tensor& real, const Tensor& fake, const TokenizerModel& model,
                                     LecamState& state, const DiscriminatorConfig& cfg) {
    if (!cfg.gan_active) throw Error(ErrorCode::invalid_argument, "discriminator step requested while the GAN is off");
    Tensor d_real = model.discriminate(real);
    Tensor d_fake = model.discriminate(stop_gradient(fake));

    Tensor hinge = add(mean(relu(add_scalar(scale(d_real, Real(-1)), Real(1)))), mean(relu(add_scalar(d_fake, Real(1)))));
    Tensor lecam = add(mean(square(add_scalar(d_real, static_cast<Real>(-state.ema_fake)))),
                       mean(square(add_scalar(d_fake, static_cast<Real>(-state.ema_real)))));

    DiscriminatorLoss out;
    out.loss = add(hinge, scale(lecam, static_cast<Real>(cfg.lecam_weight)));
    out.hinge = hinge.item();
    out.lecam = lecam.item();

    const double mr = mean(stop_gradient(d_real)).item();
    const double mf = mean(stop_gradient(d_fake)).item();
    state.ema_real = cfg.ema_decay * state.ema_real + (1.0 - cfg.ema_decay) * mr;
    state.ema_fake = cfg.ema_decay * state.ema_fake + (1.0 - cfg.ema_decay) * mf;
    return out;
}

ETT_NAMESPACE_END
