#include "causalscope/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>

#include "causalscope/error.hpp"
#include "causalscope/hashing.hpp"

namespace causalscope {

namespace {

constexpr std::string_view kDelimiters[] = {"because", "so", "therefore", "resulting", "since", "and", "while", "but"};

Template make(std::string id, std::string text, std::string delim, PhraseOrder order, Variant v,
              std::string random_slot = {}) {
    return {std::move(id), std::move(text), std::move(delim), order, v, std::move(random_slot)};
}

// One parsed "<...>" occurrence in template text.
struct SlotRef {
    std::size_t begin = 0; // byte offset of '<'
    std::size_t end = 0;   // one past '>'
    std::string kind;
    bool back_reference = false;
};

std::vector<SlotRef> parse_slots(const Template& t) {
    std::vector<SlotRef> out;
    std::size_t pos = 0;
    while ((pos = t.text.find('<', pos)) != std::string::npos) {
        const auto close = t.text.find('>', pos);
        if (close == std::string::npos) throw ConfigError(fmt::format("template {}: unclosed slot", t.id));
        SlotRef ref{pos, close + 1, t.text.substr(pos + 1, close - pos - 1), false};
        if (ref.kind.starts_with('=')) {
            ref.back_reference = true;
            ref.kind.erase(0, 1);
        }
        if (ref.kind.empty()) throw ConfigError(fmt::format("template {}: empty slot name", t.id));
        if (pos == 0 || t.text[pos - 1] != ' ') {
            throw ConfigError(fmt::format("template {}: slot <{}> must follow a space", t.id, ref.kind));
        }
        out.push_back(std::move(ref));
        pos = close + 1;
    }
    return out;
}

// Byte offsets of whole-word occurrences of `word` outside filler ranges.
std::vector<std::size_t> find_word(std::string_view text, std::string_view word,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& filler_ranges) {
    std::vector<std::size_t> found;
    std::size_t pos = 0;
    while ((pos = text.find(word, pos)) != std::string_view::npos) {
        const bool left = pos > 0 && text[pos - 1] == ' ';
        const bool right = pos + word.size() == text.size() || text[pos + word.size()] == ' ';
        bool in_filler = false;
        for (const auto& [b, e] : filler_ranges) in_filler = in_filler || (pos >= b && pos < e);
        if (left && right && !in_filler) found.push_back(pos);
        pos += word.size();
    }
    return found;
}

struct Rendered {
    std::string text;
    std::vector<SlotFill> fills;                                // spans filled in later
    std::vector<std::pair<std::size_t, std::size_t>> byte_ranges; // per fill
};

Rendered render_ranges(const Template& tmpl, const FillerMap& fillers) {
    Rendered r;
    std::size_t last = 0;
    for (const auto& ref : parse_slots(tmpl)) {
        r.text.append(tmpl.text, last, ref.begin - last);
        auto it = fillers.find(ref.kind);
        if (it == fillers.end()) throw ConfigError(fmt::format("template {}: no filler for slot <{}>", tmpl.id, ref.kind));
        r.byte_ranges.emplace_back(r.text.size(), r.text.size() + it->second.size());
        r.fills.push_back({ref.kind, it->second, {}});
        r.text += it->second;
        last = ref.end;
    }
    r.text.append(tmpl.text, last);
    return r;
}

// Token index whose byte span begins at `byte`, or -1.
int token_starting_at(const TokenizedText& tok, std::size_t byte) {
    for (std::size_t i = 0; i < tok.offsets.size(); ++i) {
        if (tok.offsets[i].begin == byte) return static_cast<int>(i);
    }
    return -1;
}

int token_ending_at(const TokenizedText& tok, std::size_t byte) {
    for (std::size_t i = 0; i < tok.offsets.size(); ++i) {
        if (tok.offsets[i].end == byte) return static_cast<int>(i);
    }
    return -1;
}

AnnotatedExample annotate_at(const TokenizedText& tok, std::size_t delim_byte, std::string_view delimiter,
                             PhraseOrder order) {
    const int seq = static_cast<int>(tok.ids.size());
    // The delimiter token carries its leading space.
    const int d = token_starting_at(tok, delim_byte == 0 ? 0 : delim_byte - 1);
    if (d < 0 || tok.offsets[d].end != delim_byte + delimiter.size()) {
        throw AnnotationError(fmt::format("delimiter '{}' is not a single token in \"{}\"", delimiter, tok.text));
    }
    if (d == 0 || d == seq - 1) {
        throw AnnotationError(fmt::format("delimiter '{}' has an empty phrase on one side in \"{}\"", delimiter, tok.text));
    }
    AnnotatedExample ex;
    ex.text = tok.text;
    ex.ids = tok.ids;
    ex.delimiter = std::string(delimiter);
    ex.order = order;
    ex.delimiter_index = d;
    const TokenSpan before{0, d};
    const TokenSpan after{d + 1, seq};
    ex.effect_span = order == PhraseOrder::effect_first ? before : after;
    ex.cause_span = order == PhraseOrder::effect_first ? after : before;
    ex.answer_position = seq - 2;
    ex.answer_id = tok.ids.back();
    return ex;
}

TokenSpan diff_span(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    int first = -1, last = -1;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            if (first < 0) first = static_cast<int>(i);
            last = static_cast<int>(i);
        }
    }
    return first < 0 ? TokenSpan{} : TokenSpan{first, last + 1};
}

std::size_t token_count(const BpeTables& tables, const std::string& filler) {
    return encode(tables, " " + filler).ids.size();
}

bool has_tag(const LexiconEntry& e, const std::string& tag) {
    return std::find(e.tags.begin(), e.tags.end(), "*") != e.tags.end() ||
           std::find(e.tags.begin(), e.tags.end(), tag) != e.tags.end();
}

bool is_wildcard(const LexiconEntry& e) { return std::find(e.tags.begin(), e.tags.end(), "*") != e.tags.end(); }

const Lexicon& lexicon_for(const LexiconSet& lexicons, const Template& t, const std::string& kind) {
    auto it = lexicons.find(kind);
    if (it == lexicons.end() || it->second.entries.empty()) {
        throw ConfigError(fmt::format("template {}: slot <{}> has no lexicon", t.id, kind));
    }
    return it->second;
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
}

std::string stats_key(const Template& t) { return fmt::format("{}/{}", t.id, to_string(t.variant)); }

} // namespace

std::string_view to_string(PhraseOrder order) { return order == PhraseOrder::effect_first ? "effect-first" : "cause-first"; }

std::string_view to_string(Variant variant) {
    switch (variant) {
    case Variant::causal: return "causal";
    case Variant::non_causal: return "non-causal";
    case Variant::random: return "random";
    }
    return "causal";
}

PhraseOrder parse_phrase_order(std::string_view name) {
    if (name == "effect-first") return PhraseOrder::effect_first;
    if (name == "cause-first") return PhraseOrder::cause_first;
    throw ParseError(fmt::format("unknown phrase order '{}'", name));
}

Variant parse_variant(std::string_view name) {
    if (name == "causal") return Variant::causal;
    if (name == "non-causal") return Variant::non_causal;
    if (name == "random") return Variant::random;
    throw ParseError(fmt::format("unknown variant '{}'", name));
}

bool is_known_delimiter(std::string_view word) {
    return std::find(std::begin(kDelimiters), std::end(kDelimiters), word) != std::end(kDelimiters);
}

bool is_causal_delimiter(std::string_view word) {
    return word == "because" || word == "so" || word == "therefore" || word == "resulting" || word == "since";
}

PhraseOrder default_order(std::string_view delimiter) {
    if (delimiter == "so" || delimiter == "therefore" || delimiter == "resulting") return PhraseOrder::cause_first;
    return PhraseOrder::effect_first;
}

std::vector<std::string> Template::slots() const {
    std::vector<std::string> out;
    for (const auto& ref : parse_slots(*this)) {
        if (std::find(out.begin(), out.end(), ref.kind) == out.end()) out.push_back(ref.kind);
    }
    return out;
}

TokenSpan AnnotatedExample::clause() const {
    return {std::min(effect_span.begin, cause_span.begin), std::max(effect_span.end, cause_span.end)};
}

const std::vector<Template>& syntax_templates() {
    using V = Variant;
    constexpr auto E = PhraseOrder::effect_first;
    constexpr auto C = PhraseOrder::cause_first;
    static const std::vector<Template> t = {
        make("syntax-1", "Alice went to the <location> because she wants to <verb> <object>", "because", E, V::causal),
        make("syntax-1", "Alice went to the <location> and she wants to <verb> <object>", "and", E, V::non_causal),
        make("syntax-1", "Alice went to the <location> because she wants to <verb> <object>", "because", E, V::random,
             "location"),
        make("syntax-2", "Alice went to the <location> because the <=location> is a good place for <object>", "because",
             E, V::causal),
        make("syntax-2", "Alice went to the <location> and the <=location> is <adjective>", "and", E, V::non_causal),
        make("syntax-2", "Alice went to the <location> because the <=location> is a good place for <object>", "because",
             E, V::random, "object"),
        make("syntax-3", "Alice plays <game> because she enjoys <pastime>", "because", E, V::causal),
        make("syntax-3", "Alice plays <game> and she is <adjective>", "and", E, V::non_causal),
        make("syntax-3", "Alice plays <game> because she enjoys <pastime>", "because", E, V::random, "pastime"),
        make("syntax-4", "Bob and Chris made <dish> so they are <mood> and <feeling>", "so", C, V::causal),
        make("syntax-4", "Bob and Chris made <dish> while they are <mood> and <feeling>", "while", C, V::non_causal),
        make("syntax-4", "Bob and Chris made <dish> so they are <mood> and <feeling>", "so", C, V::random, "mood"),
        make("syntax-5", "Bob and Chris got work to do so they are <readiness> to <task>", "so", C, V::causal),
        make("syntax-5", "Bob and Chris got work to do but they are <readiness> to <task>", "but", C, V::non_causal),
        make("syntax-5", "Bob and Chris got work to do so they are <readiness> to <task>", "so", C, V::random,
                "readiness"),
        make("syntax-6", "Alice <response> since she was <condition>", "since", E, V::causal),
        make("syntax-6", "Alice <response> while she was <condition>", "while", E, V::non_causal),
        make("syntax-6", "Alice <response> since she was <condition>", "since", E, V::random, "condition"),
        make("syntax-7", "It was <weather> therefore Bob <precaution>", "therefore", C, V::causal),
        make("syntax-7", "It was <weather> and Bob <precaution>", "and", C, V::non_causal),
        make("syntax-7", "It was <weather> therefore Bob <precaution>", "therefore", C, V::random, "precaution"),
        make("syntax-8", "The <hazard> hit the town resulting in <damage>", "resulting", C, V::causal),
        make("syntax-8", "The <hazard> hit the town and left <damage>", "and", C, V::non_causal),
        make("syntax-8", "The <hazard> hit the town resulting in <damage>", "resulting", C, V::random, "damage"),
    };
    return t;
}

const std::vector<Template>& semantic_templates() {
    using V = Variant;
    constexpr auto E = PhraseOrder::effect_first;
    constexpr auto C = PhraseOrder::cause_first;
    static const std::vector<Template> t = {
        make("ALB", "John had to <verb> because he is going to the <location>", "because", E, V::causal),
        make("AOB", "Jane will <verb> it because John is getting the <object>", "because", E, V::causal),
        make("ALS", "Mary went to the <location> so she wants to <verb>", "so", C, V::causal),
        make("ALS-2", "Nadia will be at the <location> so she will <verb>", "so", C, V::causal),
        make("AOS", "Sarah wanted to <verb> so Mark decided to get the <object>", "so", C, V::causal),
    };
    return t;
}

std::vector<Template> syntax_template_variants(std::string_view id) {
    std::vector<Template> out;
    for (const auto& t : syntax_templates()) {
        if (t.id == id) out.push_back(t);
    }
    if (out.empty()) throw ConfigError(fmt::format("unknown syntax template id '{}'", id));
    return out;
}

const Template& semantic_template(std::string_view id) {
    for (const auto& t : semantic_templates()) {
        if (t.id == id) return t;
    }
    throw ConfigError(fmt::format("unknown semantic template id '{}'", id));
}

Lexicon load_lexicon(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(fmt::format("cannot open lexicon {}", path.string()));
    Lexicon lex;
    lex.kind = path.stem().string();
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.starts_with('#')) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
            throw ParseError(fmt::format("{}:{}: expected \"filler<TAB>tags\"", path.string(), lineno));
        }
        LexiconEntry e{line.substr(0, tab), {}};
        std::string_view tags(line);
        tags.remove_prefix(tab + 1);
        while (!tags.empty()) {
            const auto comma = tags.find(',');
            const auto tag = tags.substr(0, comma);
            if (tag.empty()) throw ParseError(fmt::format("{}:{}: empty tag", path.string(), lineno));
            e.tags.emplace_back(tag);
            if (comma == std::string_view::npos) break;
            tags.remove_prefix(comma + 1);
        }
        if (!seen.insert(e.filler).second) {
            throw ParseError(fmt::format("{}:{}: duplicate filler '{}'", path.string(), lineno, e.filler));
        }
        lex.entries.push_back(std::move(e));
    }
    return lex;
}

LexiconSet load_lexicons(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError(fmt::format("lexicon directory {} not found", dir.string()));
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().extension() == ".tsv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    LexiconSet out;
    for (const auto& f : files) {
        auto lex = load_lexicon(f);
        out.emplace(lex.kind, std::move(lex));
    }
    return out;
}

bool compatible(const LexiconEntry& a, const LexiconEntry& b) {
    if (is_wildcard(a) || is_wildcard(b)) return true;
    for (const auto& t : a.tags) {
        if (std::find(b.tags.begin(), b.tags.end(), t) != b.tags.end()) return true;
    }
    return false;
}

std::vector<std::string> lexicon_issues(const Template& tmpl, const LexiconSet& lexicons) {
    std::map<std::string, std::set<std::string>> tags_by_slot;
    for (const auto& kind : tmpl.slots()) {
        for (const auto& e : lexicon_for(lexicons, tmpl, kind).entries) {
            if (!is_wildcard(e)) tags_by_slot[kind].insert(e.tags.begin(), e.tags.end());
        }
    }
    std::vector<std::string> issues;
    if (tags_by_slot.size() < 2) return issues;
    for (const auto& [kind, tags] : tags_by_slot) {
        for (const auto& tag : tags) {
            bool matched = false;
            for (const auto& [other, other_tags] : tags_by_slot) matched = matched || (other != kind && other_tags.contains(tag));
            if (!matched) issues.push_back(fmt::format("template {}: tag '{}' of <{}> matches no other slot", tmpl.id, tag, kind));
        }
    }
    return issues;
}

std::string render(const Template& tmpl, const FillerMap& fillers) { return render_ranges(tmpl, fillers).text; }

AnnotatedExample annotate_spans(std::string_view text, const Template& tmpl, const FillerMap& fillers,
                                const BpeTables& tables) {
    auto r = render_ranges(tmpl, fillers);
    if (r.text != text) throw AnnotationError(fmt::format("text \"{}\" was not produced by template {}", text, tmpl.id));
    const auto delims = find_word(r.text, tmpl.delimiter, r.byte_ranges);
    if (delims.size() != 1) {
        throw AnnotationError(fmt::format("delimiter '{}' must occur exactly once in \"{}\"", tmpl.delimiter, text));
    }
    const auto tok = encode(tables, text);
    auto ex = annotate_at(tok, delims.front(), tmpl.delimiter, tmpl.order);
    ex.variant = tmpl.variant;
    ex.template_id = tmpl.id;
    for (std::size_t i = 0; i < r.fills.size(); ++i) {
        const auto [b, e] = r.byte_ranges[i];
        const int first = token_starting_at(tok, b - 1);
        const int last = token_ending_at(tok, e);
        if (first < 0 || last < first) {
            throw AnnotationError(
                fmt::format("filler '{}' does not align with token boundaries in \"{}\"", r.fills[i].filler, text));
        }
        r.fills[i].span = {first, last + 1};
        ex.fillers.push_back(r.fills[i]);
    }
    return ex;
}

AnnotatedExample annotate_text(std::string_view text, const BpeTables& tables) {
    const auto tok = encode(tables, text);
    // Causal delimiters win over connectives such as "and" in "Bob and Chris".
    for (bool causal_only : {true, false}) {
        for (std::size_t i = 1; i < tok.ids.size(); ++i) {
            const auto piece = std::string_view(text).substr(tok.offsets[i].begin, tok.offsets[i].end - tok.offsets[i].begin);
            if (piece.size() < 2 || piece[0] != ' ') continue;
            const auto word = piece.substr(1);
            if (!is_known_delimiter(word) || (causal_only && !is_causal_delimiter(word))) continue;
            auto ex = annotate_at(tok, tok.offsets[i].begin + 1, word, default_order(word));
            ex.template_id = "text";
            if (!is_causal_delimiter(word)) ex.variant = Variant::non_causal;
            return ex;
        }
    }
    throw AnnotationError(fmt::format("no delimiter token found in \"{}\"", text));
}

std::size_t GenerationStats::dropped_total() const {
    std::size_t n = 0;
    for (const auto& [_, c] : dropped) n += c;
    return n;
}

SyntaxDataset generate_syntax_dataset(const std::vector<Template>& templates, const LexiconSet& lexicons,
                                      int n_per_template, std::uint64_t seed, const BpeTables& tables) {
    if (n_per_template < 1) throw ConfigError("n_per_template must be at least 1");
    SyntaxDataset out;
    for (const auto& tmpl : templates) {
        const auto slots = tmpl.slots();
        for (const auto& kind : slots) lexicon_for(lexicons, tmpl, kind);
        if (auto issues = lexicon_issues(tmpl, lexicons); !issues.empty()) throw ConfigError(issues.front());

        // Themes every non-random tagged slot can express.
        std::set<std::string> themes;
        bool first = true;
        for (const auto& kind : slots) {
            if (kind == tmpl.random_slot) continue;
            std::set<std::string> tags;
            bool wildcard = false;
            for (const auto& e : lexicons.find(kind)->second.entries) {
                wildcard = wildcard || is_wildcard(e);
                if (!is_wildcard(e)) tags.insert(e.tags.begin(), e.tags.end());
            }
            if (wildcard && tags.empty()) continue;
            if (first) {
                themes = tags;
                first = false;
            } else {
                std::set<std::string> both;
                std::set_intersection(themes.begin(), themes.end(), tags.begin(), tags.end(),
                                      std::inserter(both, both.end()));
                themes = std::move(both);
            }
        }
        if (themes.empty()) throw ConfigError(fmt::format("template {}: slots share no tag", tmpl.id));
        const std::vector<std::string> theme_list(themes.begin(), themes.end());

        auto& stats = out.stats[stats_key(tmpl)];
        std::mt19937_64 rng(sub_seed(seed, stats_key(tmpl)));
        // Bound attempts so an unsatisfiable random slot cannot loop forever.
        const int max_attempts = n_per_template * 20;
        for (int attempt = 0; attempt < max_attempts && static_cast<int>(stats.generated) < n_per_template; ++attempt) {
            ++stats.attempted;
            const auto& theme = pick(rng, theme_list);
            FillerMap fillers;
            std::vector<const LexiconEntry*> chosen;
            for (const auto& kind : slots) {
                if (kind == tmpl.random_slot) continue;
                std::vector<const LexiconEntry*> cands;
                for (const auto& e : lexicons.find(kind)->second.entries) {
                    if (has_tag(e, theme)) cands.push_back(&e);
                }
                const auto* e = pick(rng, cands);
                fillers[kind] = e->filler;
                chosen.push_back(e);
            }
            if (!tmpl.random_slot.empty()) {
                std::vector<const LexiconEntry*> cands;
                for (const auto& e : lexicons.find(tmpl.random_slot)->second.entries) {
                    bool clash = is_wildcard(e);
                    for (const auto* c : chosen) clash = clash || (!is_wildcard(*c) && compatible(e, *c));
                    if (!clash) cands.push_back(&e);
                }
                if (cands.empty()) {
                    ++stats.dropped["no incompatible filler"];
                    continue;
                }
                fillers[tmpl.random_slot] = pick(rng, cands)->filler;
            }
            try {
                out.examples.push_back(annotate_spans(render(tmpl, fillers), tmpl, fillers, tables));
                ++stats.generated;
            } catch (const AnnotationError&) {
                ++stats.dropped["annotation failed"];
            }
        }
    }
    return out;
}

PairDataset generate_semantic_pairs(std::string_view template_id, const LexiconSet& lexicons, std::uint64_t seed,
                                    const BpeTables& tables, std::size_t max_pairs) {
    const auto& tmpl = semantic_template(template_id);
    const auto slots = tmpl.slots();
    if (slots.size() != 2) throw ConfigError(fmt::format("template {}: expected two slots", tmpl.id));
    const auto& perturbed_kind = slots[0];
    const auto& answer_kind = slots[1];
    const auto& plex = lexicon_for(lexicons, tmpl, perturbed_kind).entries;
    const auto& alex = lexicon_for(lexicons, tmpl, answer_kind).entries;
    if (auto issues = lexicon_issues(tmpl, lexicons); !issues.empty()) throw ConfigError(issues.front());

    std::vector<std::size_t> plen(plex.size()), alen(alex.size());
    for (std::size_t i = 0; i < plex.size(); ++i) plen[i] = token_count(tables, plex[i].filler);
    for (std::size_t i = 0; i < alex.size(); ++i) alen[i] = token_count(tables, alex[i].filler);

    std::vector<std::pair<std::size_t, std::size_t>> combos;
    for (std::size_t p = 0; p < plex.size(); ++p) {
        for (std::size_t a = 0; a < alex.size(); ++a) {
            if (compatible(plex[p], alex[a])) combos.emplace_back(p, a);
        }
    }
    std::mt19937_64 rng(sub_seed(seed, tmpl.id));
    std::shuffle(combos.begin(), combos.end(), rng);

    PairDataset out;
    for (const auto& [p, a] : combos) {
        if (max_pairs != 0 && out.pairs.size() >= max_pairs) break;
        ++out.stats.attempted;
        if (alen[a] != 1) {
            ++out.stats.dropped["answer not a single token"];
            continue;
        }
        std::vector<std::size_t> replacements;
        for (std::size_t r = 0; r < plex.size(); ++r) {
            if (plen[r] == plen[p] && !compatible(plex[r], alex[a]) && !compatible(plex[r], plex[p])) {
                replacements.push_back(r);
            }
        }
        if (replacements.empty()) {
            ++out.stats.dropped["no length-matched incompatible filler"];
            continue;
        }
        const auto r = pick(rng, replacements);
        std::vector<std::size_t> alt_answers;
        for (std::size_t b = 0; b < alex.size(); ++b) {
            if (alen[b] == 1 && compatible(plex[r], alex[b]) && !compatible(plex[p], alex[b])) alt_answers.push_back(b);
        }
        if (alt_answers.empty()) {
            ++out.stats.dropped["no single-token answer for the corrupted filler"];
            continue;
        }
        const auto b = pick(rng, alt_answers);

        const FillerMap clean_f{{perturbed_kind, plex[p].filler}, {answer_kind, alex[a].filler}};
        const FillerMap corrupt_f{{perturbed_kind, plex[r].filler}, {answer_kind, alex[a].filler}};
        try {
            ContrastivePair pair;
            pair.template_id = tmpl.id;
            pair.clean = annotate_spans(render(tmpl, clean_f), tmpl, clean_f, tables);
            pair.corrupted = annotate_spans(render(tmpl, corrupt_f), tmpl, corrupt_f, tables);
            pair.corrupted.variant = Variant::random;
            pair.answer_clean = pair.clean.answer_id;
            pair.answer_corrupted = encode(tables, " " + alex[b].filler).ids.at(0);
            if (pair.clean.ids.size() != pair.corrupted.ids.size()) {
                ++out.stats.dropped["token length mismatch"];
                continue;
            }
            pair.perturbed_span = diff_span(pair.clean.ids, pair.corrupted.ids);
            check_pair(pair);
            out.pairs.push_back(std::move(pair));
            ++out.stats.generated;
        } catch (const AnnotationError&) {
            ++out.stats.dropped["annotation failed"];
        }
    }
    return out;
}

ContrastivePair make_text_pair(std::string_view clean_text, std::string_view corrupted_text, const BpeTables& tables) {
    ContrastivePair pair;
    pair.template_id = "text";
    pair.clean = annotate_text(clean_text, tables);
    pair.corrupted = annotate_text(corrupted_text, tables);
    if (pair.clean.ids.size() != pair.corrupted.ids.size()) {
        throw AnnotationError(fmt::format("pair is not token-aligned: {} vs {} tokens", pair.clean.ids.size(),
                                          pair.corrupted.ids.size()));
    }
    pair.corrupted.variant = Variant::random;
    pair.perturbed_span = diff_span(pair.clean.ids, pair.corrupted.ids);
    pair.answer_clean = pair.clean.ids.back();
    pair.answer_corrupted = pair.corrupted.ids.back();
    check_pair(pair);
    return pair;
}

void check_pair(const ContrastivePair& pair) {
    const auto& a = pair.clean.ids;
    const auto& b = pair.corrupted.ids;
    if (a.size() != b.size()) throw AnnotationError("pair is not token-aligned");
    if (pair.perturbed_span.size() <= 0) throw AnnotationError("pair has an empty perturbed span");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && !pair.perturbed_span.contains(static_cast<int>(i))) {
            throw AnnotationError(fmt::format("pair differs outside the perturbed span at position {}", i));
        }
    }
    if (pair.answer_clean == pair.answer_corrupted) throw AnnotationError("pair answers are identical");
    if (pair.clean.answer_position != pair.corrupted.answer_position) {
        throw AnnotationError("pair answer positions differ");
    }
}

nlohmann::ordered_json to_json(const AnnotatedExample& ex) {
    nlohmann::ordered_json j;
    j["template_id"] = ex.template_id;
    j["variant"] = to_string(ex.variant);
    j["text"] = ex.text;
    j["ids"] = ex.ids;
    j["delimiter"] = ex.delimiter;
    j["order"] = to_string(ex.order);
    j["effect_span"] = {ex.effect_span.begin, ex.effect_span.end};
    j["delimiter_index"] = ex.delimiter_index;
    j["cause_span"] = {ex.cause_span.begin, ex.cause_span.end};
    j["answer_position"] = ex.answer_position;
    j["answer_id"] = ex.answer_id;
    auto& fills = j["fillers"] = nlohmann::ordered_json::array();
    for (const auto& f : ex.fillers) {
        fills.push_back({{"slot", f.slot}, {"filler", f.filler}, {"span", {f.span.begin, f.span.end}}});
    }
    return j;
}

nlohmann::ordered_json to_json(const ContrastivePair& pair) {
    nlohmann::ordered_json j;
    j["template_id"] = pair.template_id;
    j["perturbed_span"] = {pair.perturbed_span.begin, pair.perturbed_span.end};
    j["answer_clean"] = pair.answer_clean;
    j["answer_corrupted"] = pair.answer_corrupted;
    j["clean"] = to_json(pair.clean);
    j["corrupted"] = to_json(pair.corrupted);
    return j;
}

namespace {

TokenSpan span_from(const nlohmann::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>()}; }

} // namespace

AnnotatedExample example_from_json(const nlohmann::json& j) {
    try {
        AnnotatedExample ex;
        ex.template_id = j.at("template_id").get<std::string>();
        ex.variant = parse_variant(j.at("variant").get<std::string>());
        ex.text = j.at("text").get<std::string>();
        ex.ids = j.at("ids").get<std::vector<TokenId>>();
        ex.delimiter = j.at("delimiter").get<std::string>();
        ex.order = parse_phrase_order(j.at("order").get<std::string>());
        ex.effect_span = span_from(j.at("effect_span"));
        ex.delimiter_index = j.at("delimiter_index").get<int>();
        ex.cause_span = span_from(j.at("cause_span"));
        ex.answer_position = j.at("answer_position").get<int>();
        ex.answer_id = j.at("answer_id").get<TokenId>();
        for (const auto& f : j.at("fillers")) {
            ex.fillers.push_back({f.at("slot").get<std::string>(), f.at("filler").get<std::string>(), span_from(f.at("span"))});
        }
        return ex;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("malformed example record: {}", e.what()));
    }
}

ContrastivePair pair_from_json(const nlohmann::json& j) {
    try {
        ContrastivePair p;
        p.template_id = j.at("template_id").get<std::string>();
        p.perturbed_span = span_from(j.at("perturbed_span"));
        p.answer_clean = j.at("answer_clean").get<TokenId>();
        p.answer_corrupted = j.at("answer_corrupted").get<TokenId>();
        p.clean = example_from_json(j.at("clean"));
        p.corrupted = example_from_json(j.at("corrupted"));
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("malformed pair record: {}", e.what()));
    }
}

namespace {

template <typename T>
void write_lines(const std::filesystem::path& path, const std::vector<T>& items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    for (const auto& it : items) out << to_json(it).dump() << '\n';
}

template <typename F>
auto read_lines(const std::filesystem::path& path, F parse) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(fmt::format("cannot open {}", path.string()));
    std::vector<decltype(parse(nlohmann::json{}))> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(parse(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
        } catch (const ParseError& e) {
            throw ParseError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
        }
    }
    return out;
}

} // namespace

void write_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedExample>& examples) {
    write_lines(path, examples);
}

void write_jsonl(const std::filesystem::path& path, const std::vector<ContrastivePair>& pairs) { write_lines(path, pairs); }

std::vector<AnnotatedExample> read_examples_jsonl(const std::filesystem::path& path) {
    return read_lines(path, [](const nlohmann::json& j) { return example_from_json(j); });
}

std::vector<ContrastivePair> read_pairs_jsonl(const std::filesystem::path& path) {
    return read_lines(path, [](const nlohmann::json& j) { return pair_from_json(j); });
}

} // namespace causalscope
