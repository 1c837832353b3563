#pragma once

// Ablation suites: modality subsets, single- vs multi-subject training, the
// no-transformer baseline, and training-set size scaling.

#include <ostream>
#include <string>
#include <vector>

#include "tribe/evaluator.hpp"
#include "tribe/trainer.hpp"

namespace tribe {

enum class AblationSuite { modality_subsets, single_subject, no_transformer, sessions_scaling };
std::string_view suite_name(AblationSuite s);
AblationSuite parse_suite(std::string_view name);

struct AblationConfig {
    NetConfig net;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    // Number of training videos kept per condition in sessions_scaling.
    std::vector<Index> scaling_videos{2, 4, 8, 16};
    Split eval_split = Split::val;
};

struct AblationRow {
    std::string condition;
    std::uint64_t seed = 0;
    std::string subject_id;
    double score = 0.0;
};

struct AblationReport {
    AblationSuite suite = AblationSuite::modality_subsets;
    std::vector<AblationRow> rows;
    std::vector<std::string> conditions;  // in run order

    // Mean over seeds of the per-seed mean over subjects.
    double condition_mean(const std::string& condition) const;
    void write_csv(std::ostream& out) const;  // condition,seed,subject_id,score
};

// Condition names of modality_subsets: visible modalities joined with '+'.
std::vector<ModalityMask> modality_subsets();
std::string subset_name(const ModalityMask& withheld);

// Keeps the first `count` training videos (sorted by id); other splits are untouched.
DatasetManifest limit_training_videos(const DatasetManifest& manifest, Index count);

AblationReport run_ablation(AblationSuite suite, const DatasetManifest& manifest, const AblationConfig& config);

}  // namespace tribe
