#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ett/config.hpp"
#include "ett/data.hpp"
#include "ett/model.hpp"

ETT_NAMESPACE_BEGIN

enum class Stage { pretrain_tokenizer, stage1, stage2, stage3_chat, stage3_gen };

inline constexpr std::array<Stage, 5> kAllStages = {Stage::pretrain_tokenizer, Stage::stage1, Stage::stage2,
                                                    Stage::stage3_chat, Stage::stage3_gen};

std::string_view stage_name(Stage s);
std::optional<Stage> parse_stage(std::string_view name);
// Stage whose checkpoint this stage starts from, if any.
std::optional<Stage> upstream_stage(Stage s);

enum class Schedule { cosine, constant };
enum class Composition { joint, alternating };

struct StageConfig {
    Stage stage = Stage::stage1;
    std::int64_t steps = 0;
    std::int64_t batch_size = 8;
    double max_lr = 1e-3;
    double min_lr = 0.0;
    double warmup_ratio = 0.03;
    Schedule schedule = Schedule::cosine;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    GroupSet trainable;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string data_dir;         // corpus written by `data gen`; empty = generate in memory
    std::uint64_t data_seed = 0;  // used when data_dir is empty
    std::uint64_t data_count = 0;
    std::string out_dir;
    bool record_wall_time = true;

    ModelConfig model;
    VqWeights vq;
    DiscriminatorConfig disc;
    std::int64_t gan_start_step = 0;

    std::map<Stage, StageConfig> stages;
    double alpha = 0.25;
    Composition composition = Composition::joint;
    bool freeze_tokenizer = false;
    std::map<Group, double> lr_mult;
    std::int64_t utilization_window = 100;
    std::int64_t checkpoint_every = 0;

    Settings settings;  // source of every value above

    const StageConfig& stage(Stage s) const { return stages.at(s); }
};

// Every accepted key with its default.
Settings default_settings();
RunConfig make_run_config(const Settings& settings);
RunConfig load_run_config(const std::string& path);

// Linear warmup over ceil(warmup_ratio * steps) steps to max_lr, then cosine
// decay to min_lr at `steps`. Constant schedule skips the decay.
double lr_at(std::int64_t step, const StageConfig& cfg);

struct AdamSlot {
    std::int64_t t = 0;  // updates applied to this parameter
    Buffer m;
    Buffer v;
};

// One Adam instance for the whole model; parameters are keyed by name and
// only those passed to step() are touched. Bias correction uses each
// parameter's own update count.
class Adam {
public:
    // Applies one update to every trainable parameter in `groups` whose
    // gradient is allocated. Throws NanAbortError on a non-finite gradient
    // before any parameter is modified.
    void step(ParamStore& params, const GroupSet& groups, double lr, double beta1, double beta2, double eps,
              const std::map<Group, double>& lr_mult, std::int64_t global_step);
    std::int64_t steps_taken() const { return t_; }
    std::map<std::string, AdamSlot>& slots() { return slots_; }
    const std::map<std::string, AdamSlot>& slots() const { return slots_; }
    void restore(std::int64_t t, std::map<std::string, AdamSlot> slots) {
        t_ = t;
        slots_ = std::move(slots);
    }

private:
    std::int64_t t_ = 0;
    std::map<std::string, AdamSlot> slots_;
};

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointState {
    std::string stage;
    std::uint64_t arch_hash = 0;
    std::uint64_t config_hash = 0;  // canonical settings text
    std::uint64_t seed = 0;
    std::int64_t step = 0;         // completed steps
    std::int64_t total_steps = 0;  // configured steps of the stage
    std::int64_t metrics_lines = 0;
    std::int64_t adam_t = 0;
    LecamState lecam;
    std::vector<std::int64_t> usage_counts;
    std::vector<std::int64_t> usage_last;
    std::int64_t usage_latest = -1;
};

struct ParamBlob {
    std::string name;
    Group group;
    Shape shape;
    Buffer values;
};

struct CheckpointData {
    CheckpointState state;
    std::vector<ParamBlob> params;
    std::map<std::string, AdamSlot> adam;
};

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointData& data);
CheckpointData parse_checkpoint(const std::vector<std::uint8_t>& bytes);
CheckpointData read_checkpoint(const std::string& path);
// Writes to a temporary file and renames it into place.
void write_checkpoint(const std::string& path, const CheckpointData& data);

CheckpointData capture_checkpoint(const EttModel& model, const Adam* adam, const CheckpointState& state);
// Copies parameter values for `groups` into the model. Validates every
// shape, the architecture hash and group presence before touching anything.
void apply_checkpoint(const CheckpointData& data, EttModel& model, const GroupSet& groups);

std::map<Group, std::uint64_t> group_hashes(const ParamStore& params);

// ---- data ----

struct TrainingData {
    Corpus corpus;
    Vocab vocab;
};

TrainingData load_training_data(const RunConfig& cfg);

// Deterministic batch for (seed, stage, step), drawn from the train split.
std::vector<std::uint64_t> batch_indices(const Corpus& corpus, std::uint64_t seed, Stage stage, std::int64_t step,
                                         std::int64_t batch_size);

// ---- stage runner ----

struct StageOptions {
    std::optional<std::string> resume;  // checkpoint to continue from
    bool force = false;
    std::int64_t stop_after = -1;  // end the run early after this many total steps (checkpoint still written)
    std::function<void(const std::string&)> log;  // progress lines
};

struct StageOutcome {
    bool skipped = false;  // identical run already complete
    std::int64_t steps_done = 0;
    LossBreakdown last;
    std::string run_dir;
    std::string checkpoint;
    std::map<Group, std::uint64_t> hashes_before;
    std::map<Group, std::uint64_t> hashes_after;
};

std::string run_dir(const RunConfig& cfg, Stage stage);
// Final (or latest interrupted) checkpoint of a stage.
std::string checkpoint_path(const RunConfig& cfg, Stage stage);

StageOutcome run_stage(Stage stage, const RunConfig& cfg, const StageOptions& options = {});

// Builds the model for `cfg` and loads the final checkpoint of `stage`.
struct LoadedModel {
    TrainingData data;
    std::unique_ptr<EttModel> model;
    CheckpointState state;
};
LoadedModel load_model(const RunConfig& cfg, const std::string& checkpoint);

// One tokenizer pretraining update: generator step on l_vq, then a
// discriminator step when the GAN is active.
LossBreakdown pretrain_step(EttModel& model, const Tensor& images, Adam& adam, const RunConfig& cfg,
                            const StageConfig& stage, std::int64_t step, LecamState& lecam);

// One update of any stage on the given corpus samples.
LossBreakdown train_step(Stage stage, EttModel& model, const TrainingData& data,
                         std::span<const std::uint64_t> samples, Adam& adam, const RunConfig& cfg,
                         std::int64_t step, LecamState& lecam);

// Settings text hash; identical configs share it.
std::uint64_t config_hash(const RunConfig& cfg);

ETT_NAMESPACE_END
