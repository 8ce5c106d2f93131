#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace aimkp {

// Classic Porter stemmer (steps 1a-5b), matching the author's reference
// implementation including its two published departures from the 1980 paper.
// Input is expected lowercase; tokens containing non a-z characters pass
// through unchanged.
std::string porter_stem(std::string_view word);

// Lowercase, whitespace-tokenize, strip non-alphanumeric characters, stem
// every token, rejoin with single spaces, then drop later duplicates keeping
// first-occurrence order. Phrases that normalize to nothing are dropped.
std::vector<std::string> normalize_phrases(const std::vector<std::string>& phrases);

// Top-K F1 where fewer than K predictions count as never-matching padding:
// precision = hits / K, recall = hits / |gold|. Inputs must already be
// normalized; preds are rank-ordered. Throws for K == 0 or empty gold.
double f1_at_k(const std::vector<std::string>& preds, const std::vector<std::string>& gold, int k);

// Average precision over the top K' = min(n, K) predictions, divided by
// min(|gold|, K'). Returns 0 when there are no predictions.
double map_at_k(const std::vector<std::string>& preds, const std::vector<std::string>& gold, int k);

enum class EvalCondition { multimodal, text_only, image_only };

const char* to_string(EvalCondition c);

struct EvalReport {
    EvalCondition condition = EvalCondition::multimodal;
    double f1_at_1 = 0.0;
    double f1_at_3 = 0.0;
    double map_at_5 = 0.0;
    int n_samples = 0;
};

struct EvalPair {
    std::vector<std::string> preds; // decoding order
    std::vector<std::string> gold;
};

// Normalizes both sides through the same pipeline, scores each sample, then
// macro-averages. Throws on an empty corpus or a sample whose gold list
// normalizes to nothing.
EvalReport evaluate_corpus(const std::vector<EvalPair>& pairs, EvalCondition condition);

} // namespace aimkp
