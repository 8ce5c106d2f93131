#include "aimkp/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "aimkp/errors.hpp"
#include "aimkp/io.hpp"
#include "aimkp/metrics.hpp"
#include "aimkp/rng.hpp"
#include "json.hpp"

namespace aimkp {

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "valid") return Split::valid;
    if (s == "test") return Split::test;
    throw DataError("unknown split tag: " + s);
}

double GenSpec::kp_count_mean() const {
    double total = 0.0, mean = 0.0;
    for (int k = 0; k < 4; ++k) {
        total += kp_count_weights[static_cast<size_t>(k)];
        mean += (k + 1) * kp_count_weights[static_cast<size_t>(k)];
    }
    return mean / total;
}

std::vector<const DataSample*> Dataset::split_view(Split s) const {
    std::vector<const DataSample*> out;
    for (const auto& ds : samples)
        if (ds.split == s) out.push_back(&ds);
    return out;
}

namespace {

// Concept phrases are drawn from this list; stems must stay pairwise
// distinct, which generate_synthetic verifies.
const char* kWordList[] = {
    "river",    "mountain", "coffee",   "garden",   "festival", "rocket",   "piano",
    "violin",   "harbor",   "castle",   "meadow",   "falcon",   "tiger",    "orchid",
    "marble",   "copper",   "silver",   "bridge",   "lantern",  "forest",   "desert",
    "island",   "volcano",  "glacier",  "thunder",  "breeze",   "autumn",   "winter",
    "summer",   "spring",   "harvest",  "orchard",  "bakery",   "library",  "museum",
    "stadium",  "market",   "temple",   "palace",   "cottage",  "village",  "canyon",
    "prairie",  "lagoon",   "reef",     "tundra",   "savanna",  "jungle",   "cavern",
    "quarry",   "mill",     "forge",    "anvil",    "compass",  "anchor",   "sail",
    "rudder",   "mast",     "galley",   "cargo",    "beacon",   "signal",   "radar",
    "sonar",    "engine",   "turbine",  "gearbox",  "piston",   "circuit",  "magnet",
    "crystal",  "quartz",   "granite",  "basalt",   "fossil",   "amber",    "pearl",
    "coral",    "kelp",     "plankton", "ember",    "heron",    "osprey",   "kestrel",
    "swallow",  "finch",    "sparrow",  "raven",    "magpie",   "badger",   "otter",
    "lynx",     "moose",    "bison",    "antelope", "gazelle",  "leopard",  "jaguar",
    "panther",  "cheetah",  "walrus",   "dolphin",  "porpoise", "narwhal",  "beluga",
    "mammoth",  "saber",    "talon",    "hoof",     "antler",   "plume",    "scale",
    "fang",     "claw",     "pelt",     "mane",     "snout",    "whisker",  "paw",
};
constexpr int kWordCount = static_cast<int>(sizeof(kWordList) / sizeof(kWordList[0]));

struct ConceptTable {
    // Global concept index -> phrase. Order: visual, text, joint.
    std::vector<std::string> phrases;
    int n_visual = 0, n_text = 0, n_joint = 0;

    const std::string& visual_phrase(int i) const { return phrases[static_cast<size_t>(i)]; }
    const std::string& text_phrase(int i) const {
        return phrases[static_cast<size_t>(n_visual + i)];
    }
    const std::string& joint_phrase(int i) const {
        return phrases[static_cast<size_t>(n_visual + n_text + i)];
    }
};

ConceptTable build_concepts(const GenSpec& spec) {
    ConceptTable table;
    table.n_visual = spec.n_visual_concepts;
    table.n_text = spec.n_text_concepts;
    table.n_joint = spec.n_joint_concepts;
    int total = table.n_visual + table.n_text + table.n_joint;
    if (2 * total > kWordCount)
        throw DataError("generator word list too small for requested concept counts");
    for (int c = 0; c < total; ++c) {
        std::string phrase = kWordList[2 * c];
        if (c % 2 == 0) {
            phrase += ' ';
            phrase += kWordList[2 * c + 1];
        }
        table.phrases.push_back(std::move(phrase));
    }
    auto normalized = normalize_phrases(table.phrases);
    if (normalized.size() != table.phrases.size())
        throw DataError("generator concept phrases collide after normalization");
    return table;
}

double uniform01(std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

int draw_kp_count(std::mt19937_64& rng, const std::array<double, 4>& weights) {
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = uniform01(rng) * total;
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
        acc += weights[static_cast<size_t>(k)];
        if (u < acc) return k + 1;
    }
    return 4;
}

} // namespace

Dataset generate_synthetic(const GenSpec& spec) {
    if (spec.n_samples < 1) throw DataError("n_samples must be >= 1");
    if (spec.grid_h < 2 || spec.grid_w < 2) throw DataError("grid dims must be >= 2");
    if (spec.text_len < 2) throw DataError("text_len must be >= 2");
    if (spec.prompt_len < 1) throw DataError("prompt_len must be >= 1");
    for (double w : spec.kp_count_weights)
        if (w < 0.0) throw DataError("kp count weights must be nonnegative");
    double mean = spec.kp_count_mean();
    if (mean < 1.0 || mean > 4.0) throw DataError("kp count mean out of [1,4]");
    // Worst case per sample: two visual concepts + one joint visual half in
    // the grid, one text concept + one joint half in the text.
    if (3 * spec.visual_cue_copies > spec.grid_h * spec.grid_w)
        throw DataError("visual cue tokens exceed grid capacity");
    if (2 * spec.text_cue_copies > spec.text_len)
        throw DataError("text cue tokens exceed text capacity");

    ConceptTable concepts = build_concepts(spec);

    Dataset ds;
    ds.prompt_len = spec.prompt_len;
    ds.grid_h = spec.grid_h;
    ds.grid_w = spec.grid_w;
    ds.text_len = spec.text_len;
    ds.visual_vocab = spec.n_visual_distractors + spec.n_visual_concepts + spec.n_joint_concepts;
    ds.text_vocab = spec.n_text_distractors + spec.n_text_concepts + spec.n_joint_concepts;
    ds.roles.n_visual_distractors = spec.n_visual_distractors;
    ds.roles.n_text_distractors = spec.n_text_distractors;
    ds.roles.n_visual_concepts = spec.n_visual_concepts;
    ds.roles.n_text_concepts = spec.n_text_concepts;
    ds.roles.n_joint_concepts = spec.n_joint_concepts;
    ds.roles.concept_phrases = concepts.phrases;

    // Output vocabulary: eos, sep, prompt tokens, then every concept word.
    ds.vocab.assign({"<eos>", "<sep>"});
    for (int p = 0; p < spec.prompt_len; ++p) ds.vocab.push_back("<p" + std::to_string(p) + ">");
    std::unordered_map<std::string, int> word_id;
    for (const auto& phrase : concepts.phrases) {
        size_t start = 0;
        while (start < phrase.size()) {
            size_t space = phrase.find(' ', start);
            if (space == std::string::npos) space = phrase.size();
            std::string word = phrase.substr(start, space - start);
            if (!word_id.count(word)) {
                word_id[word] = static_cast<int>(ds.vocab.size());
                ds.vocab.push_back(word);
            }
            start = space + 1;
        }
    }

    const int vis_cue_base = spec.n_visual_distractors;
    const int vis_joint_base = vis_cue_base + spec.n_visual_concepts;
    const int txt_cue_base = spec.n_text_distractors;
    const int txt_joint_base = txt_cue_base + spec.n_text_concepts;

    auto phrase_tokens = [&word_id](const std::string& phrase, std::vector<int>& out) {
        size_t start = 0;
        while (start < phrase.size()) {
            size_t space = phrase.find(' ', start);
            if (space == std::string::npos) space = phrase.size();
            out.push_back(word_id.at(phrase.substr(start, space - start)));
            start = space + 1;
        }
    };

    int n_train = static_cast<int>(spec.n_samples * spec.train_frac);
    int n_valid = static_cast<int>(spec.n_samples * spec.valid_frac);
    if (n_train < 1 || n_valid < 1 || n_train + n_valid >= spec.n_samples)
        throw DataError("split fractions leave an empty split");

    char idbuf[24];
    for (int i = 0; i < spec.n_samples; ++i) {
        auto rng = make_rng(spec.seed, "sample", static_cast<uint64_t>(i));
        DataSample out;
        std::snprintf(idbuf, sizeof(idbuf), "s%06d", i);
        out.sample.id = idbuf;
        out.split = i < n_train ? Split::train : (i < n_train + n_valid ? Split::valid : Split::test);

        int k = draw_kp_count(rng, spec.kp_count_weights);
        std::vector<int> visual_concepts, text_concepts, joint_concepts;
        auto draw_distinct = [&rng](int n, int count, std::vector<int>& into) {
            while (static_cast<int>(into.size()) < count) {
                int c = uniform_int(rng, 0, n - 1);
                if (std::find(into.begin(), into.end(), c) == into.end()) into.push_back(c);
            }
        };
        // Joint keyphrases are the redundantly signalled content: both
        // modalities carry a cue, so either one suffices to identify the
        // phrase once the model learns to commit from half the evidence.
        switch (k) {
            case 1: {
                double u = uniform01(rng);
                if (u < 0.35) draw_distinct(spec.n_visual_concepts, 1, visual_concepts);
                else if (u < 0.7) draw_distinct(spec.n_text_concepts, 1, text_concepts);
                else draw_distinct(spec.n_joint_concepts, 1, joint_concepts);
                break;
            }
            case 2: {
                double u = uniform01(rng);
                if (u < 1.0 / 3.0) {
                    draw_distinct(spec.n_visual_concepts, 1, visual_concepts);
                    draw_distinct(spec.n_text_concepts, 1, text_concepts);
                } else if (u < 2.0 / 3.0) {
                    draw_distinct(spec.n_visual_concepts, 1, visual_concepts);
                    draw_distinct(spec.n_joint_concepts, 1, joint_concepts);
                } else {
                    draw_distinct(spec.n_text_concepts, 1, text_concepts);
                    draw_distinct(spec.n_joint_concepts, 1, joint_concepts);
                }
                break;
            }
            case 3:
                draw_distinct(spec.n_visual_concepts, 1, visual_concepts);
                draw_distinct(spec.n_text_concepts, 1, text_concepts);
                draw_distinct(spec.n_joint_concepts, 1, joint_concepts);
                break;
            default:
                draw_distinct(spec.n_visual_concepts, 2, visual_concepts);
                draw_distinct(spec.n_text_concepts, 1, text_concepts);
                draw_distinct(spec.n_joint_concepts, 1, joint_concepts);
                break;
        }
        std::sort(visual_concepts.begin(), visual_concepts.end());

        // Grid: distractors everywhere, then cue copies at distinct cells.
        out.sample.grid_h = spec.grid_h;
        out.sample.grid_w = spec.grid_w;
        int cells = spec.grid_h * spec.grid_w;
        out.sample.grid.resize(static_cast<size_t>(cells));
        for (int cidx = 0; cidx < cells; ++cidx)
            out.sample.grid[static_cast<size_t>(cidx)] =
                uniform_int(rng, 0, spec.n_visual_distractors - 1);
        std::vector<int> cell_order(static_cast<size_t>(cells));
        std::iota(cell_order.begin(), cell_order.end(), 0);
        std::shuffle(cell_order.begin(), cell_order.end(), rng);
        size_t next_cell = 0;
        auto place_visual = [&](int token) {
            for (int c2 = 0; c2 < spec.visual_cue_copies; ++c2)
                out.sample.grid[static_cast<size_t>(cell_order[next_cell++])] = token;
        };
        for (int vc : visual_concepts) place_visual(vis_cue_base + vc);
        for (int jc : joint_concepts) place_visual(vis_joint_base + jc);

        // Text: same scheme in one dimension.
        out.sample.text.resize(static_cast<size_t>(spec.text_len));
        for (int t = 0; t < spec.text_len; ++t)
            out.sample.text[static_cast<size_t>(t)] =
                uniform_int(rng, 0, spec.n_text_distractors - 1);
        std::vector<int> pos_order(static_cast<size_t>(spec.text_len));
        std::iota(pos_order.begin(), pos_order.end(), 0);
        std::shuffle(pos_order.begin(), pos_order.end(), rng);
        size_t next_pos = 0;
        auto place_text = [&](int token) {
            for (int c2 = 0; c2 < spec.text_cue_copies; ++c2)
                out.sample.text[static_cast<size_t>(pos_order[next_pos++])] = token;
        };
        for (int tc : text_concepts) place_text(txt_cue_base + tc);
        for (int jc : joint_concepts) place_text(txt_joint_base + jc);

        // Gold keyphrases in canonical order; targets are separator-joined.
        for (int vc : visual_concepts) {
            out.keyphrases.push_back(concepts.visual_phrase(vc));
            out.provenance.push_back(KpRole::visual);
        }
        for (int tc : text_concepts) {
            out.keyphrases.push_back(concepts.text_phrase(tc));
            out.provenance.push_back(KpRole::text);
        }
        for (int jc : joint_concepts) {
            out.keyphrases.push_back(concepts.joint_phrase(jc));
            out.provenance.push_back(KpRole::joint);
        }
        for (size_t p = 0; p < out.keyphrases.size(); ++p) {
            if (p > 0) out.sample.target.push_back(kSepId);
            phrase_tokens(out.keyphrases[p], out.sample.target);
        }
        out.sample.target.push_back(kEosId);
        ds.samples.push_back(std::move(out));
    }
    return ds;
}

namespace {

nlohmann::json sample_to_json(const DataSample& ds) {
    nlohmann::json grid = nlohmann::json::array();
    for (int r = 0; r < ds.sample.grid_h; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < ds.sample.grid_w; ++c)
            row.push_back(ds.sample.grid[static_cast<size_t>(r * ds.sample.grid_w + c)]);
        grid.push_back(std::move(row));
    }
    return nlohmann::json{{"id", ds.sample.id},
                          {"grid", grid},
                          {"text", ds.sample.text},
                          {"keyphrases", ds.keyphrases},
                          {"split", to_string(ds.split)}};
}

} // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json vocab_json;
    nlohmann::json table = nlohmann::json::object();
    for (size_t i = 0; i < dataset.vocab.size(); ++i)
        table[std::to_string(i)] = dataset.vocab[i];
    vocab_json["output"] = table;
    vocab_json["prompt_len"] = dataset.prompt_len;
    vocab_json["visual_vocab"] = dataset.visual_vocab;
    vocab_json["text_vocab"] = dataset.text_vocab;
    vocab_json["grid_height"] = dataset.grid_h;
    vocab_json["grid_width"] = dataset.grid_w;
    vocab_json["text_len"] = dataset.text_len;
    if (dataset.roles.available()) {
        vocab_json["roles"] = nlohmann::json{
            {"visual_distractors", dataset.roles.n_visual_distractors},
            {"text_distractors", dataset.roles.n_text_distractors},
            {"visual_concepts", dataset.roles.n_visual_concepts},
            {"text_concepts", dataset.roles.n_text_concepts},
            {"joint_concepts", dataset.roles.n_joint_concepts},
            {"concept_phrases", dataset.roles.concept_phrases},
        };
    }

    std::string files[3] = {"train.jsonl", "valid.jsonl", "test.jsonl"};
    Split splits[3] = {Split::train, Split::valid, Split::test};
    for (int f = 0; f < 3; ++f) {
        std::string content;
        for (const auto& ds : dataset.samples) {
            if (ds.split != splits[f]) continue;
            content += sample_to_json(ds).dump();
            content += '\n';
        }
        write_file_atomic((std::filesystem::path(dir) / files[f]).string(), content);
    }
    write_file_atomic((std::filesystem::path(dir) / "vocab.json").string(), vocab_json.dump(2));
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    std::string vocab_path = (std::filesystem::path(dir) / "vocab.json").string();
    nlohmann::json vocab_json;
    try {
        vocab_json = nlohmann::json::parse(read_file(vocab_path));
        const auto& table = vocab_json.at("output");
        ds.vocab.resize(table.size());
        for (auto it = table.begin(); it != table.end(); ++it) {
            size_t id = static_cast<size_t>(std::stoul(it.key()));
            if (id >= ds.vocab.size()) throw DataError("vocab ids are not contiguous");
            ds.vocab[id] = it.value().get<std::string>();
        }
        ds.prompt_len = vocab_json.at("prompt_len").get<int>();
        ds.visual_vocab = vocab_json.at("visual_vocab").get<int>();
        ds.text_vocab = vocab_json.at("text_vocab").get<int>();
        ds.grid_h = vocab_json.at("grid_height").get<int>();
        ds.grid_w = vocab_json.at("grid_width").get<int>();
        ds.text_len = vocab_json.at("text_len").get<int>();
        if (vocab_json.contains("roles")) {
            const auto& r = vocab_json.at("roles");
            ds.roles.n_visual_distractors = r.at("visual_distractors").get<int>();
            ds.roles.n_text_distractors = r.at("text_distractors").get<int>();
            ds.roles.n_visual_concepts = r.at("visual_concepts").get<int>();
            ds.roles.n_text_concepts = r.at("text_concepts").get<int>();
            ds.roles.n_joint_concepts = r.at("joint_concepts").get<int>();
            ds.roles.concept_phrases = r.at("concept_phrases").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(vocab_path + ": " + e.what());
    }
    std::unordered_map<std::string, int> word_id;
    for (size_t i = 0; i < ds.vocab.size(); ++i) word_id[ds.vocab[i]] = static_cast<int>(i);

    std::string files[3] = {"train.jsonl", "valid.jsonl", "test.jsonl"};
    for (const auto& fname : files) {
        std::string path = (std::filesystem::path(dir) / fname).string();
        std::string content = read_file(path);
        std::istringstream in(content);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            auto fail = [&path, line_no](const std::string& why) {
                throw DataError(path + " line " + std::to_string(line_no) + ": " + why);
            };
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                fail(e.what());
            }
            if (!j.contains("id")) fail("missing \"id\" field");
            if (!j.contains("grid")) fail("missing \"grid\" field");
            if (!j.contains("text")) fail("missing \"text\" field");
            if (!j.contains("keyphrases")) fail("missing \"keyphrases\" field");
            if (!j.contains("split")) fail("missing \"split\" field");
            DataSample out;
            try {
                out.sample.id = j.at("id").get<std::string>();
                const auto& grid = j.at("grid");
                out.sample.grid_h = static_cast<int>(grid.size());
                out.sample.grid_w = out.sample.grid_h > 0 ? static_cast<int>(grid[0].size()) : 0;
                for (const auto& row : grid) {
                    if (static_cast<int>(row.size()) != out.sample.grid_w)
                        fail("ragged grid rows");
                    for (const auto& cell : row) {
                        int v = cell.get<int>();
                        if (v < 0 || v >= ds.visual_vocab) fail("visual token out of range");
                        out.sample.grid.push_back(v);
                    }
                }
                for (const auto& tok : j.at("text")) {
                    int v = tok.get<int>();
                    if (v < 0 || v >= ds.text_vocab) fail("text token out of range");
                    out.sample.text.push_back(v);
                }
                out.keyphrases = j.at("keyphrases").get<std::vector<std::string>>();
                out.split = split_from_string(j.at("split").get<std::string>());
            } catch (const nlohmann::json::exception& e) {
                fail(e.what());
            }
            if (out.keyphrases.empty()) fail("empty keyphrase list");
            for (size_t p = 0; p < out.keyphrases.size(); ++p) {
                if (p > 0) out.sample.target.push_back(kSepId);
                const std::string& phrase = out.keyphrases[p];
                size_t start = 0;
                while (start < phrase.size()) {
                    size_t space = phrase.find(' ', start);
                    if (space == std::string::npos) space = phrase.size();
                    std::string word = phrase.substr(start, space - start);
                    auto it = word_id.find(word);
                    if (it == word_id.end()) fail("keyphrase word not in vocabulary: " + word);
                    out.sample.target.push_back(it->second);
                    start = space + 1;
                }
            }
            out.sample.target.push_back(kEosId);
            ds.samples.push_back(std::move(out));
        }
    }
    if (ds.samples.empty()) throw DataError("dataset at " + dir + " is empty");
    return ds;
}

Sample ablate_modality(const Sample& sample, Modality drop) {
    Sample out = sample;
    if (drop == Modality::visual) {
        out.grid_h = 0;
        out.grid_w = 0;
        out.grid.clear();
    } else if (drop == Modality::text) {
        out.text.clear();
    }
    return out;
}

std::vector<std::string> visual_keyphrases_from_grid(const Dataset& dataset, const Sample& sample) {
    if (!dataset.roles.available())
        throw DataError("dataset carries no role layout; provenance oracle unavailable");
    const RoleLayout& rl = dataset.roles;
    std::set<int> concepts;
    for (int tok : sample.grid) {
        int c = tok - rl.vis_cue_base();
        if (c >= 0 && c < rl.n_visual_concepts) concepts.insert(c);
    }
    std::vector<std::string> out;
    for (int c : concepts) out.push_back(rl.concept_phrases[static_cast<size_t>(c)]);
    return out;
}

std::vector<std::string> text_keyphrases_from_text(const Dataset& dataset, const Sample& sample) {
    if (!dataset.roles.available())
        throw DataError("dataset carries no role layout; provenance oracle unavailable");
    const RoleLayout& rl = dataset.roles;
    std::set<int> concepts;
    for (int tok : sample.text) {
        int c = tok - rl.txt_cue_base();
        if (c >= 0 && c < rl.n_text_concepts) concepts.insert(c);
    }
    std::vector<std::string> out;
    for (int c : concepts)
        out.push_back(rl.concept_phrases[static_cast<size_t>(rl.n_visual_concepts + c)]);
    return out;
}

ModelConfig model_config_for(const Dataset& dataset) {
    ModelConfig c;
    c.visual_vocab = std::max(1, dataset.visual_vocab);
    c.text_vocab = std::max(1, dataset.text_vocab);
    c.output_vocab = static_cast<int>(dataset.vocab.size());
    c.grid_height = std::max(1, dataset.grid_h);
    c.grid_width = std::max(1, dataset.grid_w);
    c.prompt_len = dataset.prompt_len;
    int max_text = 1, max_target = 1;
    for (const auto& ds : dataset.samples) {
        max_text = std::max(max_text, static_cast<int>(ds.sample.text.size()));
        max_target = std::max(max_target, static_cast<int>(ds.sample.target.size()));
    }
    c.max_text_len = max_text;
    c.max_target_len = max_target;
    return c;
}

TrainData make_train_data(const Dataset& dataset) {
    TrainData td;
    td.vocab = dataset.vocab;
    for (const auto& ds : dataset.samples) {
        TrainSample ts;
        ts.sample = ds.sample;
        ts.gold = ds.keyphrases;
        if (ds.split == Split::train) td.train.push_back(std::move(ts));
        else if (ds.split == Split::valid) td.valid.push_back(std::move(ts));
    }
    return td;
}

} // namespace aimkp
