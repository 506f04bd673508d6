#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "causalscope/tokenizer.hpp"

namespace causalscope {

enum class PhraseOrder { effect_first, cause_first };
enum class Variant { causal, non_causal, random };

std::string_view to_string(PhraseOrder order);
std::string_view to_string(Variant variant);
PhraseOrder parse_phrase_order(std::string_view name);
Variant parse_variant(std::string_view name);

// Delimiters linking two phrases, causal and non-causal.
bool is_known_delimiter(std::string_view word);
bool is_causal_delimiter(std::string_view word);
// because/since put the effect first; so/therefore/resulting the cause.
PhraseOrder default_order(std::string_view delimiter);

// A sentence pattern. Slots are written "<kind>" and filled from the lexicon
// of that kind; "<=kind>" repeats the filler already chosen for that slot.
struct Template {
    std::string id;
    std::string text;
    std::string delimiter;
    PhraseOrder order = PhraseOrder::effect_first;
    Variant variant = Variant::causal;
    // Random variants fill this slot with a filler incompatible with the rest.
    std::string random_slot;

    // Slot kinds in order of first appearance.
    std::vector<std::string> slots() const;
};

// Syntax templates, one entry per (id, variant).
const std::vector<Template>& syntax_templates();
// Contrastive templates; the last slot holds the answer, the other is perturbed.
const std::vector<Template>& semantic_templates();
// Every syntax template (all variants) with this id; ConfigError if none.
std::vector<Template> syntax_template_variants(std::string_view id);
const Template& semantic_template(std::string_view id);

struct LexiconEntry {
    std::string filler;
    std::vector<std::string> tags; // "*" matches every tag
};

struct Lexicon {
    std::string kind;
    std::vector<LexiconEntry> entries;
};

using LexiconSet = std::map<std::string, Lexicon, std::less<>>;

// "filler<TAB>tag1,tag2" per line; kind is the file stem. ParseError names the line.
Lexicon load_lexicon(const std::filesystem::path& path);
// Every *.tsv in a directory.
LexiconSet load_lexicons(const std::filesystem::path& dir);

bool compatible(const LexiconEntry& a, const LexiconEntry& b);

// Tags carried by one slot's lexicon that no other tagged slot of the template
// can match. Empty when the template's lexicons are consistent.
std::vector<std::string> lexicon_issues(const Template& tmpl, const LexiconSet& lexicons);

// Half-open token index range.
struct TokenSpan {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool contains(int i) const { return i >= begin && i < end; }
    bool operator==(const TokenSpan&) const = default;
};

struct SlotFill {
    std::string slot;
    std::string filler;
    TokenSpan span;

    bool operator==(const SlotFill&) const = default;
};

struct AnnotatedExample {
    std::string text;
    std::vector<TokenId> ids;
    TokenSpan effect_span;
    int delimiter_index = 0;
    TokenSpan cause_span;
    std::string delimiter;
    PhraseOrder order = PhraseOrder::effect_first;
    Variant variant = Variant::causal;
    std::string template_id;
    // The final token is the answer; answer_position predicts it.
    int answer_position = 0;
    TokenId answer_id = 0;
    std::vector<SlotFill> fillers;

    // Phrase before / after the delimiter in position order.
    const TokenSpan& earlier_phrase() const { return order == PhraseOrder::effect_first ? effect_span : cause_span; }
    const TokenSpan& later_phrase() const { return order == PhraseOrder::effect_first ? cause_span : effect_span; }
    // Clause window: effect, delimiter and cause tokens.
    TokenSpan clause() const;

    bool operator==(const AnnotatedExample&) const = default;
};

struct ContrastivePair {
    std::string template_id;
    AnnotatedExample clean;
    AnnotatedExample corrupted;
    TokenSpan perturbed_span;
    TokenId answer_clean = 0;
    TokenId answer_corrupted = 0;

    bool operator==(const ContrastivePair&) const = default;
};

using FillerMap = std::map<std::string, std::string, std::less<>>;

// Substitutes fillers into the template text; ConfigError for an unfilled slot.
std::string render(const Template& tmpl, const FillerMap& fillers);

// Tokenizes `text` (which must equal render(tmpl, fillers)) and locates the
// delimiter, phrase spans and filler spans. AnnotationError when the delimiter
// is missing or not a single token, or a filler straddles token boundaries.
AnnotatedExample annotate_spans(std::string_view text, const Template& tmpl, const FillerMap& fillers,
                                const BpeTables& tables);

// Annotates a free sentence at its first causal delimiter token, falling back
// to the first non-causal one.
AnnotatedExample annotate_text(std::string_view text, const BpeTables& tables);

struct GenerationStats {
    std::size_t attempted = 0;
    std::size_t generated = 0;
    std::map<std::string, std::size_t> dropped; // reason -> count

    std::size_t dropped_total() const;
};

struct SyntaxDataset {
    std::vector<AnnotatedExample> examples;
    std::map<std::string, GenerationStats> stats; // per template id + variant
};

// n_per_template examples for each template. Causal variants draw every slot
// from one shared tag; random variants fill random_slot with a filler sharing
// no tag with the others. ConfigError for a slot without a lexicon.
SyntaxDataset generate_syntax_dataset(const std::vector<Template>& templates, const LexiconSet& lexicons,
                                      int n_per_template, std::uint64_t seed, const BpeTables& tables);

struct PairDataset {
    std::vector<ContrastivePair> pairs;
    GenerationStats stats;
};

// Token-aligned clean/corrupted pairs for a semantic template. Clean
// combinations are visited in seeded order; the earlier slot is replaced by an
// incompatible filler of equal token length. Stops after max_pairs (0 = all).
PairDataset generate_semantic_pairs(std::string_view template_id, const LexiconSet& lexicons, std::uint64_t seed,
                                    const BpeTables& tables, std::size_t max_pairs = 0);

// Pair of free sentences with equal token counts; answers are the final tokens.
ContrastivePair make_text_pair(std::string_view clean_text, std::string_view corrupted_text, const BpeTables& tables);

// Throws AnnotationError when the pair violates its alignment invariants.
void check_pair(const ContrastivePair& pair);

nlohmann::ordered_json to_json(const AnnotatedExample& ex);
nlohmann::ordered_json to_json(const ContrastivePair& pair);
AnnotatedExample example_from_json(const nlohmann::json& j);
ContrastivePair pair_from_json(const nlohmann::json& j);

void write_jsonl(const std::filesystem::path& path, const std::vector<AnnotatedExample>& examples);
void write_jsonl(const std::filesystem::path& path, const std::vector<ContrastivePair>& pairs);
std::vector<AnnotatedExample> read_examples_jsonl(const std::filesystem::path& path);
std::vector<ContrastivePair> read_pairs_jsonl(const std::filesystem::path& path);

} // namespace causalscope
