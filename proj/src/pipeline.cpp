#include "ett/pipeline.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include "json.hpp"
#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain_tokenizer: return "pretrain-tokenizer";
        case Stage::stage1: return "stage1";
        case Stage::stage2: return "stage2";
        case Stage::stage3_chat: return "stage3-chat";
        case Stage::stage3_gen: return "stage3-gen";
    }
    return "?";
}

std::optional<Stage> parse_stage(std::string_view name) {
    for (Stage s : kAllStages) {
        if (stage_name(s) == name) return s;
    }
    return std::nullopt;
}

std::optional<Stage> upstream_stage(Stage s) {
    switch (s) {
        case Stage::pretrain_tokenizer: return std::nullopt;
        case Stage::stage1: return Stage::pretrain_tokenizer;
        case Stage::stage2: return Stage::stage1;
        case Stage::stage3_chat:
        case Stage::stage3_gen: return Stage::stage2;
    }
    return std::nullopt;
}

namespace {

// Prefix of the per-stage config keys.
std::string stage_key(Stage s) {
    switch (s) {
        case Stage::pretrain_tokenizer: return "pretrain";
        case Stage::stage1: return "stage1";
        case Stage::stage2: return "stage2";
        case Stage::stage3_chat: return "stage3_chat";
        case Stage::stage3_gen: return "stage3_gen";
    }
    return "?";
}

struct StageDefaults {
    std::int64_t steps;
    std::int64_t batch;
    const char* lr;
    const char* schedule;
    const char* warmup;
    const char* beta1;
    const char* beta2;
    const char* trainable;
};

StageDefaults stage_defaults(Stage s) {
    switch (s) {
        case Stage::pretrain_tokenizer:
            return {5000, 8, "5e-4", "constant", "0", "0.5", "0.9", "encoder,decoder,codebook,discriminator"};
        case Stage::stage1: return {500, 4, "1e-3", "cosine", "0.03", "0.9", "0.999", "projector"};
        case Stage::stage2:
            return {1000, 4, "1e-3", "cosine", "0.03", "0.9", "0.999", "encoder,decoder,codebook,projector,lm"};
        case Stage::stage3_chat: return {800, 4, "5e-4", "cosine", "0.03", "0.9", "0.999", "projector,lm"};
        case Stage::stage3_gen: return {800, 4, "1e-3", "cosine", "0.03", "0.9", "0.999", "projector,lm,visual-head"};
    }
    return {};
}

const GroupSet kTokenizerGroups = {Group::encoder, Group::decoder, Group::codebook};

GroupSet parse_groups(const Settings& s, const std::string& key) {
    GroupSet out;
    for (const auto& name : s.list(key)) {
        auto g = parse_group(name);
        if (!g) throw Error(ErrorCode::config, "config key '" + key + "': unknown parameter group '" + name + "'");
        out.insert(*g);
    }
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::io, "cannot read " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_atomic(const std::string& path, const void* data, std::size_t size) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error(ErrorCode::io, "cannot write " + tmp);
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) throw Error(ErrorCode::io, "write failed for " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorCode::io, "cannot rename " + tmp + ": " + ec.message());
}

void write_text_atomic(const std::string& path, const std::string& text) { write_atomic(path, text.data(), text.size()); }

}  // namespace

Settings default_settings() {
    Settings s;
    s.declare("run.seed", "0");
    s.declare("run.out_dir", "");
    s.declare("run.record_wall_time", "true");
    s.declare("run.checkpoint_every", "0");

    s.declare("data.dir", "");
    s.declare("data.seed", "7");
    s.declare("data.count", "4000");

    const TokenizerConfig t;
    const QuantizerConfig q;
    const LmConfig l;
    s.declare("model.image_size", std::to_string(t.image_size));
    s.declare("model.patch", std::to_string(t.patch));
    s.declare("model.hidden", std::to_string(t.hidden));
    s.declare("model.blocks", std::to_string(t.blocks));
    s.declare("model.code_dim", std::to_string(t.code_dim));
    s.declare("model.disc_hidden", std::to_string(t.disc_hidden));
    s.declare("model.codebook_size", std::to_string(q.codebook_size));
    s.declare("model.width", std::to_string(l.width));
    s.declare("model.layers", std::to_string(l.layers));
    s.declare("model.heads", std::to_string(l.heads));
    s.declare("model.max_len", std::to_string(l.max_len));
    s.declare("model.projector_hidden", std::to_string(l.projector_hidden));
    s.declare("model.input_mode", "embedding");
    s.declare("model.caption_reduction", "mean");

    s.declare("quantizer.temperature", "1.0");
    s.declare("quantizer.beta_commit", "0.25");
    s.declare("quantizer.logits", "dot");
    s.declare("quantizer.dense_budget", std::to_string(q.dense_budget));
    s.declare("quantizer.top_m", std::to_string(q.top_m));

    s.declare("loss.lambda_gan", "0.1");
    s.declare("loss.lambda_entropy", "0.05");
    s.declare("loss.rec", "mse");

    s.declare("gan.enabled", "false");
    s.declare("gan.start_step", "0");
    s.declare("gan.lecam_weight", "0.001");
    s.declare("gan.ema_decay", "0.99");

    for (Stage st : kAllStages) {
        const std::string k = stage_key(st);
        const StageDefaults d = stage_defaults(st);
        s.declare(k + ".steps", std::to_string(d.steps));
        s.declare(k + ".batch_size", std::to_string(d.batch));
        s.declare(k + ".max_lr", d.lr);
        s.declare(k + ".min_lr", "0");
        s.declare(k + ".warmup_ratio", d.warmup);
        s.declare(k + ".schedule", d.schedule);
        s.declare(k + ".beta1", d.beta1);
        s.declare(k + ".beta2", d.beta2);
        s.declare(k + ".eps", "1e-8");
        s.declare(k + ".trainable", d.trainable);
    }
    s.declare("stage2.alpha", "0.25");
    s.declare("stage2.composition", "joint");
    s.declare("stage2.freeze_tokenizer", "false");
    s.declare("stage2.train_discriminator", "false");

    for (Group g : kAllGroups) s.declare("lr_mult." + std::string(group_name(g)), "1.0");
    s.declare("metrics.utilization_window", "100");
    return s;
}

RunConfig make_run_config(const Settings& s) {
    RunConfig c;
    c.settings = s;
    c.seed = static_cast<std::uint64_t>(s.integer("run.seed"));
    c.out_dir = s.str("run.out_dir");
    if (c.out_dir.empty()) {
        const char* home = std::getenv("ETT_LAB_HOME");
        c.out_dir = (home && *home) ? home : "ett_lab_runs";
    }
    c.record_wall_time = s.boolean("run.record_wall_time");
    c.checkpoint_every = s.integer("run.checkpoint_every");
    c.data_dir = s.str("data.dir");
    c.data_seed = static_cast<std::uint64_t>(s.integer("data.seed"));
    const std::int64_t count = s.integer("data.count");
    if (count <= 0) throw Error(ErrorCode::config, "data.count must be positive");
    c.data_count = static_cast<std::uint64_t>(count);

    auto& m = c.model;
    m.tokenizer.image_size = s.integer("model.image_size");
    m.tokenizer.patch = s.integer("model.patch");
    m.tokenizer.hidden = s.integer("model.hidden");
    m.tokenizer.blocks = s.integer("model.blocks");
    m.tokenizer.code_dim = s.integer("model.code_dim");
    m.tokenizer.disc_hidden = s.integer("model.disc_hidden");
    m.quantizer.codebook_size = s.integer("model.codebook_size");
    m.lm.width = s.integer("model.width");
    m.lm.layers = s.integer("model.layers");
    m.lm.heads = s.integer("model.heads");
    m.lm.max_len = s.integer("model.max_len");
    m.lm.projector_hidden = s.integer("model.projector_hidden");
    const std::string mode = s.str("model.input_mode");
    if (mode == "embedding") m.mode = InputMode::embedding;
    else if (mode == "index") m.mode = InputMode::index;
    else throw Error(ErrorCode::config, "model.input_mode must be 'embedding' or 'index'");
    const std::string red = s.str("model.caption_reduction");
    if (red == "mean") m.lm.caption_reduction = Reduction::mean;
    else if (red == "sum") m.lm.caption_reduction = Reduction::sum;
    else throw Error(ErrorCode::config, "model.caption_reduction must be 'mean' or 'sum'");

    m.quantizer.temperature = s.real("quantizer.temperature");
    if (!(m.quantizer.temperature > 0)) throw Error(ErrorCode::config, "quantizer.temperature must be positive");
    m.quantizer.beta_commit = s.real("quantizer.beta_commit");
    const std::string logits = s.str("quantizer.logits");
    if (logits == "dot") m.quantizer.logits = LogitMode::dot;
    else if (logits == "neg_l2") m.quantizer.logits = LogitMode::neg_l2;
    else throw Error(ErrorCode::config, "quantizer.logits must be 'dot' or 'neg_l2'");
    m.quantizer.dense_budget = s.integer("quantizer.dense_budget");
    m.quantizer.top_m = s.integer("quantizer.top_m");

    c.vq.lambda_gan = s.real("loss.lambda_gan");
    c.vq.lambda_entropy = s.real("loss.lambda_entropy");
    const std::string rec = s.str("loss.rec");
    if (rec == "mse") c.vq.rec = RecLoss::mse;
    else if (rec == "l1") c.vq.rec = RecLoss::l1;
    else throw Error(ErrorCode::config, "loss.rec must be 'mse' or 'l1'");
    c.vq.gan_active = s.boolean("gan.enabled");
    c.gan_start_step = s.integer("gan.start_step");
    c.disc.gan_active = c.vq.gan_active;
    c.disc.lecam_weight = s.real("gan.lecam_weight");
    c.disc.ema_decay = s.real("gan.ema_decay");

    c.alpha = s.real("stage2.alpha");
    const std::string comp = s.str("stage2.composition");
    if (comp == "joint") c.composition = Composition::joint;
    else if (comp == "alternating") c.composition = Composition::alternating;
    else throw Error(ErrorCode::config, "stage2.composition must be 'joint' or 'alternating'");
    c.freeze_tokenizer = s.boolean("stage2.freeze_tokenizer");
    const bool train_disc = s.boolean("stage2.train_discriminator");

    for (Group g : kAllGroups) c.lr_mult[g] = s.real("lr_mult." + std::string(group_name(g)));
    c.utilization_window = s.integer("metrics.utilization_window");

    for (Stage st : kAllStages) {
        const std::string k = stage_key(st);
        StageConfig sc;
        sc.stage = st;
        sc.steps = s.integer(k + ".steps");
        sc.batch_size = s.integer(k + ".batch_size");
        sc.max_lr = s.real(k + ".max_lr");
        sc.min_lr = s.real(k + ".min_lr");
        sc.warmup_ratio = s.real(k + ".warmup_ratio");
        const std::string sched = s.str(k + ".schedule");
        if (sched == "cosine") sc.schedule = Schedule::cosine;
        else if (sched == "constant") sc.schedule = Schedule::constant;
        else throw Error(ErrorCode::config, k + ".schedule must be 'cosine' or 'constant'");
        sc.beta1 = s.real(k + ".beta1");
        sc.beta2 = s.real(k + ".beta2");
        sc.eps = s.real(k + ".eps");
        sc.trainable = parse_groups(s, k + ".trainable");
        if (sc.steps < 0) throw Error(ErrorCode::config, k + ".steps must be non-negative");
        if (sc.batch_size <= 0) throw Error(ErrorCode::config, k + ".batch_size must be positive");
        if (sc.warmup_ratio < 0 || sc.warmup_ratio > 1) throw Error(ErrorCode::config, k + ".warmup_ratio must be in [0, 1]");

        if (st == Stage::stage1 && sc.trainable != GroupSet{Group::projector}) {
            throw Error(ErrorCode::config, "stage1.trainable must be exactly 'projector'");
        }
        if (st == Stage::stage2) {
            for (Group g : {Group::encoder, Group::decoder, Group::codebook, Group::projector, Group::lm}) {
                if (!sc.trainable.count(g)) {
                    throw Error(ErrorCode::config,
                                "stage2.trainable must include encoder, decoder, codebook, projector and lm");
                }
            }
            if (train_disc) sc.trainable.insert(Group::discriminator);
            if (c.freeze_tokenizer) {
                for (Group g : kTokenizerGroups) sc.trainable.erase(g);
                sc.trainable.erase(Group::discriminator);
            }
        }
        if (st == Stage::stage3_chat || st == Stage::stage3_gen) {
            for (Group g : kTokenizerGroups) {
                if (sc.trainable.count(g)) {
                    throw Error(ErrorCode::config, k + ".trainable must not include tokenizer groups");
                }
            }
        }
        c.stages[st] = sc;
    }
    return c;
}

RunConfig load_run_config(const std::string& path) {
    Settings s = default_settings();
    s.load_file(path);
    return make_run_config(s);
}

std::uint64_t config_hash(const RunConfig& cfg) {
    std::uint64_t h = fnv1a("ett-config");
    for (const auto& [k, v] : cfg.settings.values()) {
        if (k == "run.out_dir") continue;
        h = fnv1a(k, h);
        h = fnv1a(std::string_view("="), h);
        h = fnv1a(v, h);
        h = fnv1a(std::string_view("\n"), h);
    }
    return h;
}

double lr_at(std::int64_t step, const StageConfig& cfg) {
    if (step < 0 || step > cfg.steps) {
        throw Error(ErrorCode::invalid_argument,
                    "lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.steps) + "]");
    }
    const auto warmup = static_cast<std::int64_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(cfg.steps)));
    if (step < warmup) return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (cfg.schedule == Schedule::constant) return cfg.max_lr;
    const std::int64_t span = cfg.steps - warmup;
    if (span <= 0) return cfg.max_lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

void Adam::step(ParamStore& params, const GroupSet& groups, double lr, double beta1, double beta2, double eps,
                const std::map<Group, double>& lr_mult, std::int64_t global_step) {
    std::vector<Param*> active;
    for (auto& p : params.params()) {
        if (!groups.count(p.group) || !p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        for (Real g : p.tensor.grad()) {
            if (!std::isfinite(static_cast<double>(g))) throw NanAbortError(p.name, global_step);
        }
        active.push_back(&p);
    }
    ++t_;
    for (Param* p : active) {
        AdamSlot& slot = slots_[p->name];
        const auto n = static_cast<std::size_t>(p->tensor.numel());
        if (slot.m.size() != n) {
            slot.m.assign(n, Real(0));
            slot.v.assign(n, Real(0));
            slot.t = 0;
        }
        ++slot.t;
        auto it = lr_mult.find(p->group);
        const double step_lr = lr * (it == lr_mult.end() ? 1.0 : it->second);
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
        auto w = p->tensor.mutable_values();
        auto g = p->tensor.grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double m = beta1 * slot.m[i] + (1.0 - beta1) * gi;
            const double v = beta2 * slot.v[i] + (1.0 - beta2) * gi * gi;
            slot.m[i] = static_cast<Real>(m);
            slot.v[i] = static_cast<Real>(v);
            w[i] = static_cast<Real>(w[i] - step_lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
        }
    }
}

// ---- checkpoints ----
//
// Layout (little-endian):
//   "ETTCKPT\0" | u32 version | u32 sizeof(value)
//   u64 arch_hash | u64 config_hash | u64 seed | str stage
//   i64 step | i64 total_steps | i64 metrics_lines | i64 adam_t
//   f64 lecam.ema_real | f64 lecam.ema_fake
//   u64 n | i64 usage_counts[n] | i64 usage_last[n] | i64 usage_latest
//   u64 params | { str name | u8 group | u32 rank | i64 dims[rank] | value[numel] }
//   u64 slots  | { str name | i64 t | u64 n | value m[n] | value v[n] }
//   u64 fnv1a of every preceding byte
// str is u32 length followed by bytes.

namespace {

constexpr char kMagic[8] = {'E', 'T', 'T', 'C', 'K', 'P', 'T', '\0'};

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out_.insert(out_.end(), p, p + sizeof(T));
    }
    void put_str(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }
    template <class T>
    void put_array(std::span<const T> v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
        out_.insert(out_.end(), p, p + v.size() * sizeof(T));
    }
    std::vector<std::uint8_t>& bytes() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_str() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    template <class T, class V = std::vector<T>>
    V get_array(std::uint64_t n) {
        if (n > (size_ - pos_) / sizeof(T)) truncated();
        V v(static_cast<std::size_t>(n));
        std::memcpy(v.data(), data_ + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
        return v;
    }
    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) const {
        if (n > size_ - pos_) truncated();
    }
    [[noreturn]] static void truncated() {
        throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint payload is truncated");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointData& data) {
    ByteWriter w;
    for (char c : kMagic) w.put(c);
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(sizeof(Real)));
    const auto& s = data.state;
    w.put(s.arch_hash);
    w.put(s.config_hash);
    w.put(s.seed);
    w.put_str(s.stage);
    w.put(s.step);
    w.put(s.total_steps);
    w.put(s.metrics_lines);
    w.put(s.adam_t);
    w.put(s.lecam.ema_real);
    w.put(s.lecam.ema_fake);
    if (s.usage_counts.size() != s.usage_last.size()) {
        throw Error(ErrorCode::invalid_argument, "checkpoint usage arrays differ in length");
    }
    w.put(static_cast<std::uint64_t>(s.usage_counts.size()));
    w.put_array<std::int64_t>(s.usage_counts);
    w.put_array<std::int64_t>(s.usage_last);
    w.put(s.usage_latest);
    w.put(static_cast<std::uint64_t>(data.params.size()));
    for (const auto& p : data.params) {
        if (static_cast<std::int64_t>(p.values.size()) != shape_numel(p.shape)) {
            throw ShapeError("serialize_checkpoint", p.shape, Shape{static_cast<std::int64_t>(p.values.size())},
                             p.name);
        }
        w.put_str(p.name);
        w.put(static_cast<std::uint8_t>(p.group));
        w.put(static_cast<std::uint32_t>(p.shape.size()));
        w.put_array<std::int64_t>(p.shape);
        w.put_array<Real>(p.values);
    }
    w.put(static_cast<std::uint64_t>(data.adam.size()));
    for (const auto& [name, slot] : data.adam) {
        w.put_str(name);
        w.put(slot.t);
        w.put(static_cast<std::uint64_t>(slot.m.size()));
        w.put_array<Real>(slot.m);
        w.put_array<Real>(slot.v);
    }
    auto& bytes = w.bytes();
    const std::uint64_t sum = fnv1a(bytes.data(), bytes.size());
    w.put(sum);
    return std::move(bytes);
}

CheckpointData parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    using Kind = CheckpointError::Kind;
    if (bytes.size() < sizeof kMagic) throw CheckpointError(Kind::truncated, "checkpoint shorter than its header");
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError(Kind::bad_magic, "not a checkpoint file (bad magic)");
    }
    ByteReader head(bytes.data() + sizeof kMagic, bytes.size() - sizeof kMagic);
    const auto version = head.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::version_mismatch, "checkpoint format version " + std::to_string(version) +
                                                          ", expected " + std::to_string(kCheckpointVersion));
    }
    const auto value_size = head.get<std::uint32_t>();
    if (value_size != sizeof(Real)) {
        throw CheckpointError(Kind::version_mismatch, "checkpoint stores " + std::to_string(value_size * 8) +
                                                          "-bit values, this build uses " +
                                                          std::to_string(sizeof(Real) * 8));
    }
    if (bytes.size() < sizeof kMagic + 8 + sizeof(std::uint64_t)) {
        throw CheckpointError(Kind::truncated, "checkpoint payload is truncated");
    }
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, sizeof stored);
    if (stored != fnv1a(bytes.data(), body)) {
        throw CheckpointError(Kind::truncated, "checkpoint checksum mismatch (truncated or corrupt file)");
    }

    ByteReader r(bytes.data() + sizeof kMagic + 8, body - sizeof kMagic - 8);
    CheckpointData d;
    auto& s = d.state;
    s.arch_hash = r.get<std::uint64_t>();
    s.config_hash = r.get<std::uint64_t>();
    s.seed = r.get<std::uint64_t>();
    s.stage = r.get_str();
    s.step = r.get<std::int64_t>();
    s.total_steps = r.get<std::int64_t>();
    s.metrics_lines = r.get<std::int64_t>();
    s.adam_t = r.get<std::int64_t>();
    s.lecam.ema_real = r.get<double>();
    s.lecam.ema_fake = r.get<double>();
    const auto nu = r.get<std::uint64_t>();
    s.usage_counts = r.get_array<std::int64_t>(nu);
    s.usage_last = r.get_array<std::int64_t>(nu);
    s.usage_latest = r.get<std::int64_t>();
    const auto np = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < np; ++i) {
        ParamBlob p;
        p.name = r.get_str();
        const auto g = r.get<std::uint8_t>();
        if (g >= kAllGroups.size()) throw CheckpointError(Kind::truncated, "invalid group id in checkpoint");
        p.group = static_cast<Group>(g);
        const auto rank = r.get<std::uint32_t>();
        p.shape = r.get_array<std::int64_t>(rank);
        std::int64_t n = 1;
        for (auto e : p.shape) {
            if (e < 0) throw CheckpointError(Kind::truncated, "invalid shape in checkpoint");
            n *= e;
        }
        p.values = r.get_array<Real, Buffer>(static_cast<std::uint64_t>(n));
        d.params.push_back(std::move(p));
    }
    const auto ns = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < ns; ++i) {
        std::string name = r.get_str();
        AdamSlot slot;
        slot.t = r.get<std::int64_t>();
        const auto n = r.get<std::uint64_t>();
        slot.m = r.get_array<Real, Buffer>(n);
        slot.v = r.get_array<Real, Buffer>(n);
        d.adam.emplace(std::move(name), std::move(slot));
    }
    if (!r.done()) throw CheckpointError(Kind::truncated, "trailing bytes in checkpoint");
    return d;
}

CheckpointData read_checkpoint(const std::string& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_bytes(path);
    } catch (const Error&) {
        throw CheckpointError(CheckpointError::Kind::io, "cannot read checkpoint " + path);
    }
    return parse_checkpoint(bytes);
}

void write_checkpoint(const std::string& path, const CheckpointData& data) {
    const auto bytes = serialize_checkpoint(data);
    try {
        write_atomic(path, bytes.data(), bytes.size());
    } catch (const Error& e) {
        throw CheckpointError(CheckpointError::Kind::io, e.what());
    }
}

CheckpointData capture_checkpoint(const EttModel& model, const Adam* adam, const CheckpointState& state) {
    CheckpointData d;
    d.state = state;
    d.state.arch_hash = model.architecture_hash();
    d.state.usage_counts = model.codebook.usage.counts();
    d.state.usage_last = model.codebook.usage.last_step();
    d.state.usage_latest = model.codebook.usage.latest_step();
    if (adam) {
        d.state.adam_t = adam->steps_taken();
        d.adam = adam->slots();
    }
    for (const auto& p : model.params.params()) {
        const auto v = p.tensor.values();
        d.params.push_back({p.name, p.group, p.tensor.shape(), Buffer(v.begin(), v.end())});
    }
    return d;
}

void apply_checkpoint(const CheckpointData& data, EttModel& model, const GroupSet& groups) {
    using Kind = CheckpointError::Kind;
    if (data.state.arch_hash != model.architecture_hash()) {
        throw CheckpointError(Kind::config_mismatch, "checkpoint architecture hash " + hex64(data.state.arch_hash) +
                                                         " does not match the configured model " +
                                                         hex64(model.architecture_hash()));
    }
    std::map<std::string, const ParamBlob*> by_name;
    std::set<Group> present;
    for (const auto& b : data.params) {
        by_name[b.name] = &b;
        present.insert(b.group);
    }
    for (Group g : groups) {
        bool model_has = false;
        for (const auto& p : model.params.params()) model_has = model_has || p.group == g;
        if (model_has && !present.count(g)) {
            throw CheckpointError(Kind::missing_group,
                                  "checkpoint has no parameters for group '" + std::string(group_name(g)) + "'");
        }
    }
    std::vector<std::pair<Param*, const ParamBlob*>> plan;
    for (auto& p : model.params.params()) {
        if (!groups.count(p.group)) continue;
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw CheckpointError(Kind::missing_group, "checkpoint lacks parameter '" + p.name + "'");
        }
        const ParamBlob& b = *it->second;
        if (b.shape != p.tensor.shape() || b.group != p.group) {
            throw CheckpointError(Kind::shape_mismatch, "parameter '" + p.name + "' has shape " + shape_str(b.shape) +
                                                            " in the checkpoint, model expects " +
                                                            shape_str(p.tensor.shape()));
        }
        plan.emplace_back(&p, &b);
    }
    for (auto& [p, b] : plan) {
        auto dst = p->tensor.mutable_values();
        std::copy(b->values.begin(), b->values.end(), dst.begin());
    }
}

std::map<Group, std::uint64_t> group_hashes(const ParamStore& params) {
    std::map<Group, std::uint64_t> out;
    for (Group g : kAllGroups) {
        for (const auto& p : params.params()) {
            if (p.group == g) {
                out[g] = params.group_hash(g);
                break;
            }
        }
    }
    return out;
}

// ---- data ----

TrainingData load_training_data(const RunConfig& cfg) {
    if (!cfg.data_dir.empty()) {
        return TrainingData{Corpus::load(cfg.data_dir), Vocab::load(cfg.data_dir + "/vocab.txt")};
    }
    return TrainingData{Corpus(cfg.data_seed, cfg.data_count), Vocab::from_alphabet(caption_alphabet())};
}

std::vector<std::uint64_t> batch_indices(const Corpus& corpus, std::uint64_t seed, Stage stage, std::int64_t step,
                                         std::int64_t batch_size) {
    const auto& train = corpus.train_indices();
    if (train.empty()) throw Error(ErrorCode::invalid_argument, "training split is empty");
    Rng rng(hash_combine(hash_combine(seed, static_cast<std::uint64_t>(stage) + 1), static_cast<std::uint64_t>(step)));
    std::vector<std::uint64_t> out(static_cast<std::size_t>(batch_size));
    for (auto& i : out) i = train[rng.below(train.size())];
    return out;
}

// ---- training steps ----

namespace {

GroupSet without(GroupSet set, Group g) {
    set.erase(g);
    return set;
}

void adam_step(EttModel& model, Adam& adam, const GroupSet& groups, const RunConfig& cfg, const StageConfig& sc,
               std::int64_t step) {
    adam.step(model.params, groups, lr_at(step, sc), sc.beta1, sc.beta2, sc.eps, cfg.lr_mult, step);
}

void discriminator_update(EttModel& model, const Tensor& images, const Tensor& fake, Adam& adam,
                          const RunConfig& cfg, const StageConfig& sc, std::int64_t step, LecamState& lecam) {
    model.params.zero_grad();
    DiscriminatorConfig dc = cfg.disc;
    dc.gan_active = true;
    const DiscriminatorLoss d = discriminator_loss(images, fake, model.tokenizer, lecam, dc);
    backward(d.loss);
    adam_step(model, adam, {Group::discriminator}, cfg, sc, step);
}

std::vector<std::vector<std::int64_t>> encode_captions(const TrainingData& data,
                                                       std::span<const std::uint64_t> samples) {
    std::vector<std::vector<std::int64_t>> out;
    out.reserve(samples.size());
    for (auto i : samples) out.push_back(data.vocab.encode(data.corpus.caption(i)));
    return out;
}

Tensor batch_images(const TrainingData& data, std::span<const std::uint64_t> samples) {
    std::vector<Image> images;
    images.reserve(samples.size());
    for (auto i : samples) images.push_back(data.corpus.image(i));
    return images_to_tensor(images);
}

// Frozen tokenizer pass for stages that do not train it.
QuantizationResult frozen_quantize(const EttModel& model, const Tensor& images) {
    NoGradGuard guard;
    return quantize(model.tokenizer.encode(images), model.codebook, model.config().quantizer);
}

}  // namespace

LossBreakdown pretrain_step(EttModel& model, const Tensor& images, Adam& adam, const RunConfig& cfg,
                            const StageConfig& sc, std::int64_t step, LecamState& lecam) {
    VqWeights w = cfg.vq;
    w.gan_active = cfg.vq.gan_active && step >= cfg.gan_start_step;
    model.params.zero_grad();
    VqForward f = vq_loss(images, model.tokenizer, model.codebook, model.config().quantizer, w);
    backward(f.l_vq);
    adam_step(model, adam, without(sc.trainable, Group::discriminator), cfg, sc, step);
    model.codebook.usage.record(f.quant.indices, step);
    if (w.gan_active && sc.trainable.count(Group::discriminator)) {
        discriminator_update(model, images, f.reconstruction, adam, cfg, sc, step, lecam);
    }
    model.params.zero_grad();
    return f.breakdown;
}

LossBreakdown train_step(Stage stage, EttModel& model, const TrainingData& data,
                         std::span<const std::uint64_t> samples, Adam& adam, const RunConfig& cfg, std::int64_t step,
                         LecamState& lecam) {
    const StageConfig& sc = cfg.stage(stage);
    const auto batch = static_cast<std::int64_t>(samples.size());
    const Tensor images = batch_images(data, samples);
    if (stage == Stage::pretrain_tokenizer) return pretrain_step(model, images, adam, cfg, sc, step, lecam);

    const auto texts = encode_captions(data, samples);
    const auto& sp = model.special();
    LossBreakdown out;
    model.params.zero_grad();

    if (stage == Stage::stage2) {
        VqWeights w = cfg.vq;
        VqForward f = vq_loss(images, model.tokenizer, model.codebook, model.config().quantizer, w);
        const Tensor l_cap = caption_loss(model.visual_inputs(f.quant, batch), texts, model.lm, sp);
        out = f.breakdown;
        out.l_cap = l_cap.item();
        out.cap_active = true;
        out.total = out.l_cap + cfg.alpha * out.l_vq;
        Tensor objective;
        if (cfg.composition == Composition::joint) {
            objective = add(l_cap, scale(f.l_vq, static_cast<Real>(cfg.alpha)));
        } else {
            objective = step % 2 == 0 ? l_cap : scale(f.l_vq, static_cast<Real>(cfg.alpha));
        }
        if (objective.requires_grad()) backward(objective);
        adam_step(model, adam, without(sc.trainable, Group::discriminator), cfg, sc, step);
        model.codebook.usage.record(f.quant.indices, step);
        if (w.gan_active && sc.trainable.count(Group::discriminator)) {
            discriminator_update(model, images, f.reconstruction, adam, cfg, sc, step, lecam);
        }
    } else {
        const QuantizationResult q = frozen_quantize(model, images);
        model.codebook.usage.record(q.indices, step);
        if (stage == Stage::stage3_gen) {
            const Tensor visual = model.visual_from_indices(q.indices, batch);
            const Tensor l_gen = generation_loss(visual, texts, q.indices, model.lm, sp);
            backward(l_gen);
            out.l_gen = l_gen.item();
            out.gen_active = true;
            out.total = out.l_gen;
        } else {
            const Tensor l_cap = caption_loss(model.visual_inputs(q, batch), texts, model.lm, sp);
            backward(l_cap);
            out.l_cap = l_cap.item();
            out.cap_active = true;
            out.total = out.l_cap;
        }
        adam_step(model, adam, sc.trainable, cfg, sc, step);
    }
    model.params.zero_grad();
    return out;
}

// ---- stage runner ----

std::string run_dir(const RunConfig& cfg, Stage stage) { return (fs::path(cfg.out_dir) / stage_name(stage)).string(); }

std::string checkpoint_path(const RunConfig& cfg, Stage stage) {
    return (fs::path(run_dir(cfg, stage)) / "checkpoint.bin").string();
}

namespace {

// Exclusive lock on a run directory; a lock left by a dead process is taken over.
class RunLock {
public:
    explicit RunLock(const std::string& dir) : path_((fs::path(dir) / ".lock").string()) {
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const std::string pid = std::to_string(::getpid()) + "\n";
                const auto written = ::write(fd, pid.data(), pid.size());
                (void)written;
                ::close(fd);
                return;
            }
            std::ifstream f(path_);
            long pid = 0;
            f >> pid;
            if (pid > 0 && ::kill(static_cast<pid_t>(pid), 0) == 0) {
                throw Error(ErrorCode::io, "run directory " + dir + " is locked by process " + std::to_string(pid));
            }
            std::error_code ec;
            fs::remove(path_, ec);
        }
        throw Error(ErrorCode::io, "cannot lock run directory " + dir);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

// Groups a stage takes from its upstream checkpoint.
GroupSet inherited_groups(Stage s) {
    if (s == Stage::stage1) return {Group::encoder, Group::decoder, Group::codebook, Group::discriminator};
    return {kAllGroups.begin(), kAllGroups.end()};
}

json hashes_json(const std::map<Group, std::uint64_t>& h) {
    json out = json::object();
    for (const auto& [g, v] : h) out[std::string(group_name(g))] = hex64(v);
    return out;
}

std::map<Group, std::uint64_t> hashes_from_json(const json& j) {
    std::map<Group, std::uint64_t> out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (auto g = parse_group(it.key())) out[*g] = std::stoull(it.value().get<std::string>(), nullptr, 16);
    }
    return out;
}

json metrics_line(std::int64_t step, Stage stage, double lr, const LossBreakdown& b, double utilization,
                  double wall_ms) {
    json j;
    j["step"] = step;
    j["stage"] = std::string(stage_name(stage));
    j["lr"] = lr;
    j["l_rec"] = b.l_rec;
    j["l_quant"] = b.l_quant;
    j["l_gan"] = b.l_gan;
    j["l_entropy"] = b.l_entropy;
    j["l_cap"] = b.l_cap;
    j["l_vq"] = b.l_vq;
    j["total"] = b.total;
    j["codebook_utilization"] = utilization;
    j["wall_ms"] = wall_ms;
    j["l_gen"] = b.l_gen;
    j["l_lpips"] = b.l_lpips;
    return j;
}

// Keeps the first `lines` lines of a metrics file.
void truncate_lines(const std::string& path, std::int64_t lines) {
    std::ifstream in(path);
    std::string kept;
    std::string line;
    for (std::int64_t i = 0; i < lines && std::getline(in, line); ++i) kept += line + "\n";
    in.close();
    write_text_atomic(path, kept);
}

}  // namespace

StageOutcome run_stage(Stage stage, const RunConfig& cfg, const StageOptions& options) {
    const StageConfig& sc = cfg.stage(stage);
    const std::string dir = run_dir(cfg, stage);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create run directory " + dir + ": " + ec.message());
    RunLock lock(dir);
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    std::optional<CheckpointData> upstream;
    std::string upstream_path;
    std::uint64_t upstream_sum = 0;
    if (auto up = upstream_stage(stage)) {
        upstream_path = checkpoint_path(cfg, *up);
        if (!fs::exists(upstream_path)) throw MissingUpstreamError(std::string(stage_name(*up)), upstream_path);
        const auto bytes = read_bytes(upstream_path);
        upstream_sum = fnv1a(bytes.data(), bytes.size());
        upstream = parse_checkpoint(bytes);
        if (upstream->state.step != upstream->state.total_steps) {
            throw MissingUpstreamError(std::string(stage_name(*up)), upstream_path + " (incomplete run)");
        }
    }

    const std::uint64_t chash = config_hash(cfg);
    const std::uint64_t run_id = hash_combine(hash_combine(chash, static_cast<std::uint64_t>(stage)), upstream_sum);
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    const std::string metrics_path = (fs::path(dir) / "metrics.jsonl").string();
    const std::string hashes_path = (fs::path(dir) / "group_hashes.json").string();
    const std::string ckpt_path = checkpoint_path(cfg, stage);

    StageOutcome outcome;
    outcome.run_dir = dir;
    outcome.checkpoint = ckpt_path;

    if (!options.force && !options.resume && fs::exists(manifest_path) && fs::exists(ckpt_path) &&
        fs::exists(hashes_path)) {
        try {
            const json m = json::parse(read_bytes(manifest_path));
            if (m.at("run_id") == hex64(run_id) && m.at("complete").get<bool>()) {
                const json h = json::parse(read_bytes(hashes_path));
                outcome.skipped = true;
                outcome.steps_done = m.at("steps_done").get<std::int64_t>();
                outcome.hashes_before = hashes_from_json(h.at("before"));
                outcome.hashes_after = hashes_from_json(h.at("after"));
                log("run " + hex64(run_id) + " already complete; use --force to rerun");
                return outcome;
            }
        } catch (const json::exception&) {
            // unreadable manifest: rerun
        }
    }

    const TrainingData data = load_training_data(cfg);
    EttModel model(cfg.model, data.vocab, cfg.seed);
    if (upstream) apply_checkpoint(*upstream, model, inherited_groups(stage));
    outcome.hashes_before = group_hashes(model.params);

    Adam adam;
    LecamState lecam;
    if (upstream) lecam = upstream->state.lecam;
    std::int64_t start = 0;
    std::int64_t metrics_lines = 0;
    if (options.resume) {
        CheckpointData ck = read_checkpoint(*options.resume);
        if (ck.state.stage != stage_name(stage)) {
            throw CheckpointError(CheckpointError::Kind::config_mismatch,
                                  "resume checkpoint belongs to stage '" + ck.state.stage + "'");
        }
        if (ck.state.config_hash != chash) {
            throw CheckpointError(CheckpointError::Kind::config_mismatch,
                                  "resume checkpoint was written with a different configuration");
        }
        apply_checkpoint(ck, model, {kAllGroups.begin(), kAllGroups.end()});
        model.codebook.usage.restore(ck.state.usage_counts, ck.state.usage_last, ck.state.usage_latest);
        adam.restore(ck.state.adam_t, std::move(ck.adam));
        lecam = ck.state.lecam;
        start = ck.state.step;
        metrics_lines = ck.state.metrics_lines;
        if (fs::exists(metrics_path)) truncate_lines(metrics_path, metrics_lines);
        log("resuming " + std::string(stage_name(stage)) + " at step " + std::to_string(start));
    } else {
        write_text_atomic(metrics_path, "");
    }
    model.params.set_trainable(sc.trainable);

    auto write_state = [&](std::int64_t steps_done) {
        CheckpointState st;
        st.stage = std::string(stage_name(stage));
        st.config_hash = chash;
        st.seed = cfg.seed;
        st.step = steps_done;
        st.total_steps = sc.steps;
        st.metrics_lines = metrics_lines;
        st.lecam = lecam;
        write_checkpoint(ckpt_path, capture_checkpoint(model, &adam, st));
    };

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw Error(ErrorCode::io, "cannot open " + metrics_path);
    std::int64_t step = start;
    const std::int64_t log_every = std::max<std::int64_t>(1, sc.steps / 20);
    for (; step < sc.steps; ++step) {
        if (options.stop_after >= 0 && step >= options.stop_after) break;
        const auto t0 = std::chrono::steady_clock::now();
        const auto samples = batch_indices(data.corpus, cfg.seed, stage, step, sc.batch_size);
        const LossBreakdown b = train_step(stage, model, data, samples, adam, cfg, step, lecam);
        const double util = model.codebook.usage.utilization(cfg.utilization_window);
        const double wall =
            cfg.record_wall_time
                ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                : 0.0;
        metrics << metrics_line(step, stage, lr_at(step, sc), b, util, wall).dump() << '\n';
        ++metrics_lines;
        outcome.last = b;
        if ((step + 1) % log_every == 0 || step + 1 == sc.steps) {
            std::ostringstream msg;
            msg << stage_name(stage) << " step " << step + 1 << "/" << sc.steps << " total " << b.total;
            log(msg.str());
        }
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < sc.steps) {
            metrics.flush();
            write_state(step + 1);
        }
    }
    metrics.flush();
    if (!metrics) throw Error(ErrorCode::io, "write failed for " + metrics_path);
    metrics.close();
    write_state(step);
    outcome.steps_done = step;
    outcome.hashes_after = group_hashes(model.params);

    json changed = json::array();
    for (const auto& [g, h] : outcome.hashes_after) {
        if (outcome.hashes_before.at(g) != h) changed.push_back(std::string(group_name(g)));
    }
    json hashes;
    hashes["before"] = hashes_json(outcome.hashes_before);
    hashes["after"] = hashes_json(outcome.hashes_after);
    hashes["changed"] = changed;
    write_text_atomic(hashes_path, hashes.dump(2) + "\n");

    json manifest;
    manifest["run_id"] = hex64(run_id);
    manifest["stage"] = std::string(stage_name(stage));
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = hex64(chash);
    manifest["config"] = cfg.settings.overrides();
    if (upstream) {
        manifest["upstream"] = {{"stage", upstream->state.stage},
                                {"checkpoint", fs::absolute(upstream_path).string()},
                                {"checksum", hex64(upstream_sum)}};
    } else {
        manifest["upstream"] = nullptr;
    }
    manifest["artifacts"] = {{"checkpoint", "checkpoint.bin"},
                             {"metrics", "metrics.jsonl"},
                             {"group_hashes", "group_hashes.json"}};
    manifest["steps_done"] = step;
    manifest["total_steps"] = sc.steps;
    manifest["complete"] = step == sc.steps;
    write_text_atomic(manifest_path, manifest.dump(2) + "\n");
    return outcome;
}

LoadedModel load_model(const RunConfig& cfg, const std::string& checkpoint) {
    CheckpointData ck = read_checkpoint(checkpoint);
    LoadedModel out{load_training_data(cfg), nullptr, {}};
    out.model = std::make_unique<EttModel>(cfg.model, out.data.vocab, cfg.seed);
    apply_checkpoint(ck, *out.model, {kAllGroups.begin(), kAllGroups.end()});
    out.model->codebook.usage.restore(ck.state.usage_counts, ck.state.usage_last, ck.state.usage_latest);
    out.model->params.set_trainable({});
    out.state = std::move(ck.state);
    return out;
}

ETT_NAMESPACE_END
