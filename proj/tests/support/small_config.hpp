#pragma once

#include <string>

#include "ett/pipeline.hpp"

namespace ett::testing {

// A model and recipe small enough to run every stage in about a second.
inline Settings small_settings(const std::string& out_dir) {
    Settings s = default_settings();
    s.set("run.out_dir", out_dir);
    s.set("run.record_wall_time", "false");
    s.set("data.count", "64");
    s.set("model.patch", "8");
    s.set("model.hidden", "16");
    s.set("model.blocks", "1");
    s.set("model.code_dim", "8");
    s.set("model.disc_hidden", "8");
    s.set("model.codebook_size", "32");
    s.set("model.width", "16");
    s.set("model.layers", "1");
    s.set("model.heads", "2");
    s.set("model.projector_hidden", "16");
    for (const char* k : {"pretrain", "stage1", "stage2", "stage3_chat", "stage3_gen"}) {
        s.set(std::string(k) + ".steps", "6");
        s.set(std::string(k) + ".batch_size", "2");
    }
    return s;
}

inline RunConfig small_config(const std::string& out_dir) { return make_run_config(small_settings(out_dir)); }

}  // namespace ett::testing
