#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"

namespace aimkp {

enum class Split { train, valid, test };
enum class KpRole { visual, text, joint };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

// Synthetic paired-modality generator. Each keyphrase is planted with a known
// provenance: visual-only phrases are signalled by cue tokens in the grid
// alone, text-only ones by cue tokens in the text alone, and joint ones need
// a cue in each modality. Everything else is distractor noise.
struct GenSpec {
    int n_samples = 1000;
    int grid_h = 6;
    int grid_w = 6;
    int text_len = 12;
    int n_visual_concepts = 10;
    int n_text_concepts = 10;
    int n_joint_concepts = 6;
    int n_visual_distractors = 12;
    int n_text_distractors = 12;
    // P(k keyphrases) for k = 1..4; defaults give mean 1.33.
    std::array<double, 4> kp_count_weights = {0.71, 0.26, 0.02, 0.01};
    int visual_cue_copies = 3;
    int text_cue_copies = 2;
    int prompt_len = 2;
    uint64_t seed = 7;
    double train_frac = 0.8;
    double valid_frac = 0.1;

    double kp_count_mean() const;
};

struct DataSample {
    Sample sample;
    std::vector<std::string> keyphrases; // canonical order: visual, text, joint
    std::vector<KpRole> provenance;      // parallel to keyphrases; diagnostics only
    Split split = Split::train;
};

// Token-role layout of a generated dataset: distractor ids first, then
// concept cue ids, then joint-cue ids, within each modality's vocabulary.
struct RoleLayout {
    int n_visual_distractors = 0;
    int n_text_distractors = 0;
    int n_visual_concepts = 0;
    int n_text_concepts = 0;
    int n_joint_concepts = 0;
    std::vector<std::string> concept_phrases; // visual, then text, then joint

    bool available() const { return !concept_phrases.empty(); }
    int vis_cue_base() const { return n_visual_distractors; }
    int txt_cue_base() const { return n_text_distractors; }
};

struct Dataset {
    std::vector<DataSample> samples;
    std::vector<std::string> vocab; // output token id -> string
    int prompt_len = 2;
    int visual_vocab = 0;
    int text_vocab = 0;
    int grid_h = 0;
    int grid_w = 0;
    int text_len = 0;
    RoleLayout roles; // empty for external data

    std::vector<const DataSample*> split_view(Split s) const;
};

// Pure function of the spec; throws DataError on infeasible specs (cue
// tokens exceeding grid/text capacity, vocabulary too small).
Dataset generate_synthetic(const GenSpec& spec);

// Directory layout: train.jsonl / valid.jsonl / test.jsonl + vocab.json.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Replaces one modality by an empty placeholder; the model never sees it.
Sample ablate_modality(const Sample& sample, Modality drop);

// Rule-based provenance oracles: recover role-tagged phrases from one
// modality alone. Used to verify that planted keyphrases really live where
// the generator says they do.
std::vector<std::string> visual_keyphrases_from_grid(const Dataset& dataset, const Sample& sample);
std::vector<std::string> text_keyphrases_from_text(const Dataset& dataset, const Sample& sample);

// Model dimensions implied by a dataset.
ModelConfig model_config_for(const Dataset& dataset);

TrainData make_train_data(const Dataset& dataset);

} // namespace aimkp
