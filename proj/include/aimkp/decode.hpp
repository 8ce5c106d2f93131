#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aimkp/model.hpp"

namespace aimkp {

struct DecodeConfig {
    enum class Strategy { greedy, beam_sample };
    Strategy strategy = Strategy::greedy;
    int beam_size = 5;
    double temperature = 0.5;
    uint64_t seed = 0;
    int max_len = 24; // clamped to ModelConfig.max_target_len
};

DecodeConfig::Strategy decode_strategy_from_string(const std::string& s);

// Generated target tokens, end symbol excluded.
std::vector<int> decode_tokens(const ModelParams& params, const Sample& context,
                               const DecodeConfig& cfg);

// Splits a generated token stream on separator symbols and maps ids through
// the vocabulary; rank is emission order.
std::vector<std::string> tokens_to_phrases(const std::vector<int>& tokens,
                                           const std::vector<std::string>& vocab);

std::vector<std::string> decode(const ModelParams& params, const Sample& context,
                                const DecodeConfig& cfg, const std::vector<std::string>& vocab);

} // namespace aimkp
