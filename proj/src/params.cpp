#include "ett/params.hpp"

#include <algorithm>

#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

std::string_view group_name(Group g) {
    switch (g) {
        case Group::encoder: return "encoder";
        case Group::decoder: return "decoder";
        case Group::codebook: return "codebook";
        case Group::discriminator: return "discriminator";
        case Group::projector: return "projector";
        case Group::lm: return "lm";
        case Group::visual_head: return "visual-head";
    }
    return "?";
}

std::optional<Group> parse_group(std::string_view name) {
    for (Group g : kAllGroups) {
        if (group_name(g) == name) return g;
    }
    return std::nullopt;
}

std::string group_set_str(const GroupSet& groups) {
    std::string out;
    for (Group g : groups) {
        if (!out.empty()) out += ',';
        out += group_name(g);
    }
    return out;
}

Tensor ParamStore::add(const std::string& name, Group group, Shape shape, Init init, double stddev) {
    if (find(name)) throw Error(ErrorCode::invalid_argument, "duplicate parameter '" + name + "'");
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    Buffer values(n, Real(0));
    if (init == Init::ones) {
        std::fill(values.begin(), values.end(), Real(1));
    } else if (init == Init::normal && stddev > 0.0) {
        Rng rng(hash_combine(seed_, fnv1a(name)));
        for (auto& v : values) v = static_cast<Real>(rng.normal() * stddev);
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    params_.push_back(Param{name, group, t});
    return t;
}

const Param* ParamStore::find(std::string_view name) const {
    auto it = std::find_if(params_.begin(), params_.end(), [&](const Param& p) { return p.name == name; });
    return it == params_.end() ? nullptr : &*it;
}

Param* ParamStore::find(std::string_view name) {
    auto it = std::find_if(params_.begin(), params_.end(), [&](const Param& p) { return p.name == name; });
    return it == params_.end() ? nullptr : &*it;
}

void ParamStore::set_trainable(const GroupSet& groups) {
    for (auto& p : params_) p.tensor.set_requires_grad(groups.count(p.group) > 0);
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

std::uint64_t ParamStore::group_hash(Group g) const {
    std::uint64_t h = fnv1a(group_name(g));
    for (const auto& p : params_) {
        if (p.group != g) continue;
        h = fnv1a(p.name, h);
        const auto& shape = p.tensor.shape();
        h = fnv1a(shape.data(), shape.size() * sizeof(std::int64_t), h);
        // Hash the single-precision image of the values so that the hash is the
        // same in both builds for parameters that round-trip exactly.
        for (Real v : p.tensor.values()) {
            const float f = static_cast<float>(v);
            h = fnv1a(&f, sizeof f, h);
        }
    }
    return h;
}

Linear make_linear(ParamStore& store, const std::string& name, Group group, std::int64_t in, std::int64_t out,
                   double stddev, bool bias) {
    Linear l;
    l.weight = store.add(name + ".weight", group, Shape{in, out}, stddev > 0 ? Init::normal : Init::zeros, stddev);
    if (bias) l.bias = store.add(name + ".bias", group, Shape{out}, Init::zeros);
    return l;
}

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, Group group, std::int64_t dim) {
    return LayerNorm{store.add(name + ".gamma", group, Shape{dim}, Init::ones),
                     store.add(name + ".beta", group, Shape{dim}, Init::zeros)};
}

ETT_NAMESPACE_END
