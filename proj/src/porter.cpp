#include "aimkp/metrics.hpp"

#include <array>
#include <cstring>

namespace aimkp {
namespace {

bool is_cons(const std::string& w, size_t i) {
    switch (w[i]) {
        case 'a': case 'e': case 'i': case 'o': case 'u':
            return false;
        case 'y':
            return i == 0 ? true : !is_cons(w, i - 1);
        default:
            return true;
    }
}

// Number of vowel->consonant transitions in w[0..len), the m of the stemmer:
// [C](VC)^m[V].
int measure(const std::string& w, size_t len) {
    size_t i = 0;
    while (i < len && is_cons(w, i)) ++i;
    int n = 0;
    while (i < len) {
        while (i < len && !is_cons(w, i)) ++i;
        if (i >= len) break;
        ++n;
        while (i < len && is_cons(w, i)) ++i;
    }
    return n;
}

bool has_vowel(const std::string& w, size_t len) {
    for (size_t i = 0; i < len; ++i) {
        if (!is_cons(w, i)) return true;
    }
    return false;
}

bool double_cons(const std::string& w, size_t len) {
    return len >= 2 && w[len - 1] == w[len - 2] && is_cons(w, len - 1);
}

// consonant-vowel-consonant at the end of w[0..len), final consonant not w/x/y.
bool cvc(const std::string& w, size_t len) {
    if (len < 3) return false;
    if (!is_cons(w, len - 1) || is_cons(w, len - 2) || !is_cons(w, len - 3)) return false;
    char c = w[len - 1];
    return c != 'w' && c != 'x' && c != 'y';
}

bool ends_with(const std::string& w, const char* suffix) {
    size_t n = std::strlen(suffix);
    if (w.size() < n) return false;
    return std::memcmp(w.data() + w.size() - n, suffix, n) == 0;
}

struct Rule {
    const char* suffix;
    const char* replacement;
};

// First suffix that matches wins; the measure condition then decides whether
// the replacement is applied, and no later suffix is tried either way. This
// mirrors the reference stemmer's dispatch.
bool apply_rules(std::string& w, const Rule* rules, size_t count, int min_measure) {
    for (size_t r = 0; r < count; ++r) {
        if (!ends_with(w, rules[r].suffix)) continue;
        size_t stem_len = w.size() - std::strlen(rules[r].suffix);
        if (measure(w, stem_len) > min_measure) {
            w.resize(stem_len);
            w.append(rules[r].replacement);
        }
        return true;
    }
    return false;
}

void step1ab(std::string& w) {
    if (w.back() == 's') {
        if (ends_with(w, "sses")) {
            w.resize(w.size() - 2);
        } else if (ends_with(w, "ies")) {
            w.resize(w.size() - 3);
            w.push_back('i');
        } else if (w.size() >= 2 && w[w.size() - 2] != 's') {
            w.pop_back();
        }
    }
    bool trimmed = false;
    if (ends_with(w, "eed")) {
        if (measure(w, w.size() - 3) > 0) w.pop_back();
    } else if (ends_with(w, "ed") && has_vowel(w, w.size() - 2)) {
        w.resize(w.size() - 2);
        trimmed = true;
    } else if (ends_with(w, "ing") && has_vowel(w, w.size() - 3)) {
        w.resize(w.size() - 3);
        trimmed = true;
    }
    if (!trimmed) return;
    if (ends_with(w, "at") || ends_with(w, "bl") || ends_with(w, "iz")) {
        w.push_back('e');
    } else if (double_cons(w, w.size())) {
        char c = w.back();
        if (c != 'l' && c != 's' && c != 'z') w.pop_back();
    } else if (measure(w, w.size()) == 1 && cvc(w, w.size())) {
        w.push_back('e');
    }
}

void step1c(std::string& w) {
    if (w.back() == 'y' && has_vowel(w, w.size() - 1)) w.back() = 'i';
}

void step2(std::string& w) {
    // "bli"->"ble" and "logi"->"log" are the reference implementation's
    // departures from the published table.
    static constexpr std::array<Rule, 21> rules = {{
        {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"}, {"anci", "ance"},
        {"izer", "ize"},    {"bli", "ble"},     {"alli", "al"},   {"entli", "ent"},
        {"eli", "e"},       {"ousli", "ous"},   {"ization", "ize"}, {"ation", "ate"},
        {"ator", "ate"},    {"alism", "al"},    {"iveness", "ive"}, {"fulness", "ful"},
        {"ousness", "ous"}, {"aliti", "al"},    {"iviti", "ive"}, {"biliti", "ble"},
        {"logi", "log"},
    }};
    apply_rules(w, rules.data(), rules.size(), 0);
}

void step3(std::string& w) {
    static constexpr std::array<Rule, 7> rules = {{
        {"icate", "ic"}, {"ative", ""}, {"alize", "al"}, {"iciti", "ic"},
        {"ical", "ic"},  {"ful", ""},   {"ness", ""},
    }};
    apply_rules(w, rules.data(), rules.size(), 0);
}

void step4(std::string& w) {
    static constexpr std::array<const char*, 19> suffixes = {
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment",
        "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    };
    for (const char* s : suffixes) {
        if (!ends_with(w, s)) continue;
        size_t stem_len = w.size() - std::strlen(s);
        if (std::strcmp(s, "ion") == 0) {
            // "ion" only counts as a suffix after s or t; otherwise keep
            // scanning (nothing later can match a word ending in "ion").
            if (stem_len == 0 || (w[stem_len - 1] != 's' && w[stem_len - 1] != 't')) continue;
        }
        if (measure(w, stem_len) > 1) w.resize(stem_len);
        return;
    }
}

void step5(std::string& w) {
    if (w.back() == 'e') {
        int a = measure(w, w.size());
        if (a > 1 || (a == 1 && !cvc(w, w.size() - 1))) w.pop_back();
    }
    if (w.back() == 'l' && double_cons(w, w.size()) && measure(w, w.size()) > 1) w.pop_back();
}

} // namespace

std::string porter_stem(std::string_view word) {
    std::string w(word);
    if (w.size() <= 2) return w;
    for (char c : w) {
        if (c < 'a' || c > 'z') return w;
    }
    step1ab(w);
    step1c(w);
    step2(w);
    step3(w);
    step4(w);
    step5(w);
    return w;
}

} // namespace aimkp
