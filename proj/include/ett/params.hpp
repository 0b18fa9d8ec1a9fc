#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ett/ops.hpp"

ETT_NAMESPACE_BEGIN

enum class Group { encoder, decoder, codebook, discriminator, projector, lm, visual_head };

inline constexpr std::array<Group, 7> kAllGroups = {Group::encoder,   Group::decoder, Group::codebook,
                                                    Group::discriminator, Group::projector, Group::lm,
                                                    Group::visual_head};

std::string_view group_name(Group g);
std::optional<Group> parse_group(std::string_view name);
using GroupSet = std::set<Group>;
std::string group_set_str(const GroupSet& groups);

struct Param {
    std::string name;
    Group group;
    Tensor tensor;
};

enum class Init { zeros, ones, normal };

// Owns every learnable tensor of a model. Initial values are a pure function
// of (seed, parameter name), so adding a parameter never shifts another.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    Tensor add(const std::string& name, Group group, Shape shape, Init init, double stddev = 0.0);

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const Param* find(std::string_view name) const;
    Param* find(std::string_view name);

    // Marks exactly the listed groups as trainable.
    void set_trainable(const GroupSet& groups);
    void zero_grad();
    std::uint64_t group_hash(Group g) const;
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<Param> params_;
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out], undefined when bias-free
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

Linear make_linear(ParamStore& store, const std::string& name, Group group, std::int64_t in, std::int64_t out,
                   double stddev, bool bias = true);

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, Group group, std::int64_t dim);

ETT_NAMESPACE_END
