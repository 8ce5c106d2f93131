#include "aimkp/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <unordered_set>

namespace aimkp {

const char* to_string(EvalCondition c) {
    switch (c) {
        case EvalCondition::multimodal: return "multimodal";
        case EvalCondition::text_only: return "text-only";
        case EvalCondition::image_only: return "image-only";
    }
    return "?";
}

namespace {

std::string normalize_token(std::string_view token) {
    std::string t;
    t.reserve(token.size());
    for (char c : token) {
        unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) t.push_back(static_cast<char>(std::tolower(u)));
    }
    if (t.empty()) return t;
    return porter_stem(t);
}

std::string normalize_phrase(const std::string& phrase) {
    std::string out;
    size_t i = 0;
    while (i < phrase.size()) {
        while (i < phrase.size() && std::isspace(static_cast<unsigned char>(phrase[i]))) ++i;
        size_t start = i;
        while (i < phrase.size() && !std::isspace(static_cast<unsigned char>(phrase[i]))) ++i;
        if (i == start) continue;
        std::string tok = normalize_token(std::string_view(phrase).substr(start, i - start));
        if (tok.empty()) continue;
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

} // namespace

std::vector<std::string> normalize_phrases(const std::vector<std::string>& phrases) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    out.reserve(phrases.size());
    for (const auto& p : phrases) {
        std::string n = normalize_phrase(p);
        if (n.empty()) continue;
        if (seen.insert(n).second) out.push_back(std::move(n));
    }
    return out;
}

double f1_at_k(const std::vector<std::string>& preds, const std::vector<std::string>& gold, int k) {
    if (k <= 0) throw std::invalid_argument("f1_at_k: K must be >= 1");
    if (gold.empty()) throw std::invalid_argument("f1_at_k: empty gold set");
    std::unordered_set<std::string> gold_set(gold.begin(), gold.end());
    size_t top = std::min(preds.size(), static_cast<size_t>(k));
    int hits = 0;
    for (size_t r = 0; r < top; ++r) {
        if (gold_set.count(preds[r])) ++hits;
    }
    // Positions beyond n are padded with labels that never match, so the
    // precision denominator is always K.
    double precision = static_cast<double>(hits) / static_cast<double>(k);
    double recall = static_cast<double>(hits) / static_cast<double>(gold_set.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

double map_at_k(const std::vector<std::string>& preds, const std::vector<std::string>& gold, int k) {
    if (k <= 0) throw std::invalid_argument("map_at_k: K must be >= 1");
    if (gold.empty()) throw std::invalid_argument("map_at_k: empty gold set");
    if (preds.empty()) return 0.0;
    std::unordered_set<std::string> gold_set(gold.begin(), gold.end());
    size_t k_prime = std::min(preds.size(), static_cast<size_t>(k));
    int hits = 0;
    double sum = 0.0;
    for (size_t r = 0; r < k_prime; ++r) {
        if (gold_set.count(preds[r])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    double denom = static_cast<double>(std::min(gold_set.size(), k_prime));
    return sum / denom;
}

EvalReport evaluate_corpus(const std::vector<EvalPair>& pairs, EvalCondition condition) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_corpus: empty corpus");
    EvalReport report;
    report.condition = condition;
    report.n_samples = static_cast<int>(pairs.size());
    double f1_1 = 0.0, f1_3 = 0.0, map_5 = 0.0;
    for (const auto& pair : pairs) {
        auto preds = normalize_phrases(pair.preds);
        auto gold = normalize_phrases(pair.gold);
        if (gold.empty()) throw std::invalid_argument("evaluate_corpus: sample with empty gold list");
        f1_1 += f1_at_k(preds, gold, 1);
        f1_3 += f1_at_k(preds, gold, 3);
        map_5 += map_at_k(preds, gold, 5);
    }
    double n = static_cast<double>(pairs.size());
    report.f1_at_1 = f1_1 / n;
    report.f1_at_3 = f1_3 / n;
    report.map_at_5 = map_5 / n;
    return report;
}

} // namespace aimkp
