#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ett/data.hpp"
#include "ett/quantizer.hpp"

ETT_NAMESPACE_BEGIN

enum class RecLoss { mse, l1 };

struct TokenizerConfig {
    std::int64_t image_size = 32;  // H = W
    std::int64_t patch = 4;        // downsampling factor s
    std::int64_t hidden = 128;     // D_enc
    std::int64_t blocks = 2;
    std::int64_t code_dim = 32;  // D
    std::int64_t disc_hidden = 64;
};

// Pre-norm residual MLP block: x + W2 gelu(W1 ln(x)).
struct ResidualBlock {
    LayerNorm norm;
    Linear fc1;
    Linear fc2;
    Tensor operator()(const Tensor& x) const { return add(x, fc2(gelu(fc1(norm(x))))); }
};

// Patch-MLP encoder E, decoder G and the patch discriminator.
class TokenizerModel {
public:
    TokenizerModel(ParamStore& store, const TokenizerConfig& cfg);

    const TokenizerConfig& config() const { return cfg_; }
    std::int64_t grid() const { return cfg_.image_size / cfg_.patch; }

    // [B, H, W, 3] -> [B, H/s, W/s, D]
    Tensor encode(const Tensor& images) const;
    // [B, h, w, D] -> [B, h*s, w*s, 3]
    Tensor decode(const Tensor& z) const;
    // [B, H, W, 3] -> per-patch logits [B, (H/s)(W/s)]
    Tensor discriminate(const Tensor& images) const;

    Linear& encoder_out() { return enc_out_; }
    Linear& encoder_in() { return enc_in_; }
    Linear& decoder_in() { return dec_in_; }
    Linear& decoder_out() { return dec_out_; }

private:
    TokenizerConfig cfg_;
    Linear enc_in_;
    std::vector<ResidualBlock> enc_blocks_;
    LayerNorm enc_norm_;
    Linear enc_out_;
    Linear dec_in_;
    std::vector<ResidualBlock> dec_blocks_;
    LayerNorm dec_norm_;
    Linear dec_out_;
    Linear disc_in_;
    Linear disc_mid_;
    Linear disc_out_;
};

// Stacks images into a [B, H, W, 3] tensor.
Tensor images_to_tensor(std::span<const Image> images);
// Splits a [B, H, W, 3] tensor into images (values are not clamped).
std::vector<Image> tensor_to_images(const Tensor& t);

struct VqWeights {
    double lambda_gan = 0.1;
    double lambda_entropy = 0.05;
    bool gan_active = false;
    RecLoss rec = RecLoss::mse;
};

// Scalar record of every loss term. l_lpips is always 0 (unsupported).
struct LossBreakdown {
    double l_rec = 0;
    double l_quant = 0;
    double l_lpips = 0;
    double l_gan = 0;
    double l_entropy = 0;
    double l_cap = 0;
    double l_gen = 0;
    double l_vq = 0;
    double total = 0;
    bool rec_active = false;
    bool quant_active = false;
    bool lpips_supported = false;
    bool gan_active = false;
    bool entropy_active = false;
    bool cap_active = false;
    bool gen_active = false;

    // l_rec + l_quant + l_lpips + lambda_G l_gan + lambda_E l_entropy.
    void set_vq_from_terms(const VqWeights& w);
};

struct VqForward {
    Tensor l_vq;  // graph value of the weighted sum
    Tensor l_rec;
    Tensor l_gan;
    Tensor reconstruction;
    QuantizationResult quant;
    LossBreakdown breakdown;
};

VqForward vq_loss(const Tensor& images, const TokenizerModel& model, const Codebook& codebook,
                  const QuantizerConfig& qcfg, const VqWeights& weights);

struct LecamState {
    double ema_real = 0.0;
    double ema_fake = 0.0;
};

struct DiscriminatorConfig {
    bool gan_active = false;
    double lecam_weight = 0.001;
    double ema_decay = 0.99;
};

struct DiscriminatorLoss {
    Tensor loss;
    double hinge = 0;
    double lecam = 0;
};

// Hinge loss plus LeCAM anchoring of real/fake logits to each other's EMA.
// `fake` is detached here. Updates `state` after computing the penalty.
DiscriminatorLoss discriminator_loss(const Tensor& real, const Tensor& fake, const TokenizerModel& model,
                                     LecamState& state, const DiscriminatorConfig& cfg);

// Hinge part alone, on given logits.
double hinge_discriminator_loss(std::span<const Real> real_logits, std::span<const Real> fake_logits);

ETT_NAMESPACE_END
