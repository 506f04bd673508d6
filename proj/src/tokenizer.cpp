#include "causalscope/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "causalscope/error.hpp"

namespace causalscope {

namespace {

struct CodepointRange {
    char32_t first;
    char32_t last;
};

#include "unicode_tables.inc"

template <std::size_t N>
bool in_ranges(const CodepointRange (&table)[N], char32_t cp) {
    auto it = std::upper_bound(std::begin(table), std::end(table), cp,
                               [](char32_t value, const CodepointRange& r) { return value < r.first; });
    if (it == std::begin(table)) return false;
    --it;
    return cp <= it->last;
}

bool is_letter(char32_t cp) { return in_ranges(kLetterRanges, cp); }
bool is_number(char32_t cp) { return in_ranges(kNumberRanges, cp); }
bool is_space(char32_t cp) { return in_ranges(kSpaceRanges, cp); }
bool is_other(char32_t cp) { return !is_space(cp) && !is_letter(cp) && !is_number(cp); }

struct Codepoint {
    char32_t value;
    std::size_t byte_begin;
    std::size_t byte_len;
};

// Invalid sequences decode byte-by-byte as U+FFFD-like "other" characters.
std::vector<Codepoint> decode_utf8(std::string_view s) {
    std::vector<Codepoint> out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        char32_t cp = b0;
        if (b0 >= 0xC0 && b0 < 0xE0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if (b0 >= 0xE0 && b0 < 0xF0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if (b0 >= 0xF0 && b0 < 0xF8) {
            len = 4;
            cp = b0 & 0x07;
        } else if (b0 >= 0x80) {
            out.push_back({0xFFFD, i, 1});
            ++i;
            continue;
        }
        bool ok = i + len <= s.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            if ((b & 0xC0) != 0x80) ok = false;
            cp = (cp << 6) | (b & 0x3F);
        }
        if (!ok) {
            out.push_back({0xFFFD, i, 1});
            ++i;
            continue;
        }
        out.push_back({cp, i, len});
        i += len;
    }
    return out;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// GPT-2's byte-to-unicode table: printable Latin-1 bytes map to themselves,
// the rest are shifted to code points 256 and up in byte order.
std::array<char32_t, 256> byte_to_unicode() {
    std::array<char32_t, 256> table{};
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) table[b] = printable[b] ? static_cast<char32_t>(b) : next++;
    return table;
}

std::string merge_key(std::string_view left, std::string_view right) {
    std::string key;
    key.reserve(left.size() + right.size() + 1);
    key.append(left);
    key.push_back(' ');
    key.append(right);
    return key;
}

} // namespace

BpeTables BpeTables::from_data(std::vector<std::pair<std::string, TokenId>> vocab,
                               std::vector<std::pair<std::string, std::string>> merges) {
    BpeTables t;
    const auto unicode = byte_to_unicode();
    for (int b = 0; b < 256; ++b) {
        append_utf8(t.byte_encoder_[b], unicode[b]);
        t.byte_decoder_.emplace(unicode[b], static_cast<std::uint8_t>(b));
    }

    const auto n = vocab.size();
    t.id_to_token_.assign(n, {});
    std::vector<bool> seen(n, false);
    for (auto& [token, id] : vocab) {
        if (id < 0 || static_cast<std::size_t>(id) >= n) {
            throw ParseError(fmt::format("vocab: id {} for token '{}' outside [0, {})", id, token, n));
        }
        if (seen[id]) {
            throw ParseError(fmt::format("vocab: duplicate id {} (tokens '{}' and '{}')", id,
                                         t.id_to_token_[id], token));
        }
        seen[id] = true;
        t.id_to_token_[id] = token;
        if (!t.token_to_id_.emplace(token, id).second) {
            throw ParseError(fmt::format("vocab: duplicate token '{}'", token));
        }
    }
    for (int b = 0; b < 256; ++b) {
        if (!t.token_to_id_.contains(t.byte_encoder_[b])) {
            throw ParseError(fmt::format("vocab: missing byte token for byte {}", b));
        }
    }

    t.merge_ranks_.reserve(merges.size());
    for (std::size_t rank = 0; rank < merges.size(); ++rank) {
        const auto& [left, right] = merges[rank];
        // Line numbers count the header as line 1.
        const auto line = rank + 2;
        for (const auto* sym : {&left, &right}) {
            if (!t.token_to_id_.contains(*sym)) {
                throw ParseError(fmt::format("merges line {}: unknown symbol '{}'", line, *sym));
            }
        }
        if (!t.token_to_id_.contains(left + right)) {
            throw ParseError(fmt::format("merges line {}: merged symbol '{}{}' not in vocab", line, left, right));
        }
        // First occurrence wins, as with the reference rank dictionary built in order.
        t.merge_ranks_.emplace(merge_key(left, right), static_cast<int>(rank));
    }
    t.merge_count_ = merges.size();
    return t;
}

int BpeTables::merge_rank(std::string_view left, std::string_view right) const {
    auto it = merge_ranks_.find(merge_key(left, right));
    return it == merge_ranks_.end() ? -1 : it->second;
}

TokenId BpeTables::token_id(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& BpeTables::token_string(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw ArgumentError(fmt::format("token id {} out of range [0, {})", id, id_to_token_.size()));
    }
    return id_to_token_[id];
}

int BpeTables::symbol_byte(char32_t symbol) const {
    auto it = byte_decoder_.find(symbol);
    return it == byte_decoder_.end() ? -1 : it->second;
}

BpeTables load_bpe(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) {
    std::ifstream vin(vocab_path, std::ios::binary);
    if (!vin) throw LoadError(fmt::format("cannot open vocab file {}", vocab_path.string()));
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(vin);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(fmt::format("{}: malformed JSON: {}", vocab_path.string(), e.what()));
    }
    if (!doc.is_object()) throw ParseError(fmt::format("{}: expected a JSON object", vocab_path.string()));

    std::vector<std::pair<std::string, TokenId>> vocab;
    vocab.reserve(doc.size());
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (!it.value().is_number_integer()) {
            throw ParseError(fmt::format("{}: token '{}' has a non-integer id", vocab_path.string(), it.key()));
        }
        vocab.emplace_back(it.key(), it.value().get<TokenId>());
    }

    std::ifstream min(merges_path, std::ios::binary);
    if (!min) throw LoadError(fmt::format("cannot open merges file {}", merges_path.string()));
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(min, line)) {
        ++lineno;
        if (lineno == 1) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
            line.find(' ', sp + 1) != std::string::npos) {
            throw ParseError(fmt::format("{} line {}: expected 'left right', got '{}'", merges_path.string(), lineno, line));
        }
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    try {
        return BpeTables::from_data(std::move(vocab), std::move(merges));
    } catch (const ParseError& e) {
        throw ParseError(fmt::format("{} / {}: {}", vocab_path.string(), merges_path.string(), e.what()));
    }
}

std::vector<ByteSpan> pretokenize(std::string_view text) {
    const auto cps = decode_utf8(text);
    const auto n = cps.size();
    std::vector<ByteSpan> pieces;

    auto run_end = [&](std::size_t from, auto pred) {
        std::size_t e = from;
        while (e < n && pred(cps[e].value)) ++e;
        return e;
    };
    auto emit = [&](std::size_t a, std::size_t b) {
        pieces.push_back({cps[a].byte_begin, cps[b - 1].byte_begin + cps[b - 1].byte_len});
    };

    std::size_t i = 0;
    while (i < n) {
        const char32_t c = cps[i].value;

        if (c == U'\'' && i + 1 < n) {
            const char32_t c1 = cps[i + 1].value;
            if (c1 == U's' || c1 == U't' || c1 == U'm' || c1 == U'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if (i + 2 < n) {
                const char32_t c2 = cps[i + 2].value;
                if ((c1 == U'r' && c2 == U'e') || (c1 == U'v' && c2 == U'e') || (c1 == U'l' && c2 == U'l')) {
                    emit(i, i + 3);
                    i += 3;
                    continue;
                }
            }
        }

        // " ?class+" for letters, numbers, then everything else that is not space.
        bool matched = false;
        for (auto pred : {is_letter, is_number, is_other}) {
            std::size_t start = i;
            if (c == U' ' && i + 1 < n && pred(cps[i + 1].value)) {
                start = i + 1;
            } else if (!pred(c)) {
                continue;
            }
            const auto e = run_end(start, pred);
            emit(i, e);
            i = e;
            matched = true;
            break;
        }
        if (matched) continue;

        // Whitespace: a run not followed by a non-space keeps everything, otherwise
        // the last space is left to prefix the next piece.
        const auto e = run_end(i, is_space);
        if (e == n) {
            emit(i, e);
            i = e;
        } else if (e - i >= 2) {
            emit(i, e - 1);
            i = e - 1;
        } else {
            emit(i, i + 1);
            i += 1;
        }
    }
    return pieces;
}

namespace {

struct Symbol {
    std::string text;
    std::size_t bytes;
};

void bpe_piece(const BpeTables& tables, std::string_view piece, std::size_t byte_base, TokenizedText& out) {
    std::vector<Symbol> word;
    word.reserve(piece.size());
    for (unsigned char b : piece) word.push_back({tables.byte_symbol(b), 1});

    while (word.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        for (std::size_t k = 0; k + 1 < word.size(); ++k) {
            const int r = tables.merge_rank(word[k].text, word[k + 1].text);
            if (r >= 0 && r < best_rank) best_rank = r;
        }
        if (best_rank == std::numeric_limits<int>::max()) break;

        // Locate the pair text again, then merge every occurrence left to right.
        std::string first, second;
        for (std::size_t k = 0; k + 1 < word.size(); ++k) {
            if (tables.merge_rank(word[k].text, word[k + 1].text) == best_rank) {
                first = word[k].text;
                second = word[k + 1].text;
                break;
            }
        }
        std::vector<Symbol> merged;
        merged.reserve(word.size());
        for (std::size_t k = 0; k < word.size();) {
            if (k + 1 < word.size() && word[k].text == first && word[k + 1].text == second) {
                merged.push_back({first + second, word[k].bytes + word[k + 1].bytes});
                k += 2;
            } else {
                merged.push_back(std::move(word[k]));
                k += 1;
            }
        }
        word = std::move(merged);
    }

    std::size_t pos = byte_base;
    for (const auto& sym : word) {
        const auto id = tables.token_id(sym.text);
        if (id < 0) throw Error(fmt::format("BPE produced symbol '{}' missing from vocab", sym.text));
        out.ids.push_back(id);
        out.offsets.push_back({pos, pos + sym.bytes});
        pos += sym.bytes;
    }
}

} // namespace

TokenizedText encode(const BpeTables& tables, std::string_view text) {
    TokenizedText out;
    out.text = std::string(text);
    for (const auto& span : pretokenize(text)) {
        bpe_piece(tables, text.substr(span.begin, span.end - span.begin), span.begin, out);
    }
    return out;
}

std::string decode(const BpeTables& tables, std::span<const TokenId> ids) {
    std::string mapped;
    for (auto id : ids) mapped += tables.token_string(id);
    std::string bytes;
    bytes.reserve(mapped.size());
    for (const auto& cp : decode_utf8(mapped)) {
        const int b = tables.symbol_byte(cp.value);
        if (b < 0) throw Error(fmt::format("decode: symbol U+{:04X} has no byte mapping", static_cast<std::uint32_t>(cp.value)));
        bytes.push_back(static_cast<char>(b));
    }
    return bytes;
}

std::string token_text(const BpeTables& tables, TokenId id) {
    const TokenId one[] = {id};
    return decode(tables, one);
}

} // namespace causalscope
