#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace causalscope {

using TokenId = std::int32_t;

// Vocabulary, merge ranks and the byte <-> printable-unicode mapping of a
// GPT-2 style byte-level BPE. Immutable once loaded; safe to share.
class BpeTables {
public:
    // Token strings are UTF-8 encodings of byte-encoded symbols ("Ġthe").
    static BpeTables from_data(std::vector<std::pair<std::string, TokenId>> vocab,
                               std::vector<std::pair<std::string, std::string>> merges);

    std::size_t vocab_size() const { return id_to_token_.size(); }
    std::size_t merge_count() const { return merge_count_; }

    // Rank of the merge (left, right), or -1 when the pair never merges.
    int merge_rank(std::string_view left, std::string_view right) const;
    // Id of a byte-encoded token string, or -1.
    TokenId token_id(std::string_view token) const;
    const std::string& token_string(TokenId id) const;

    // UTF-8 of the printable character standing in for a raw byte.
    const std::string& byte_symbol(std::uint8_t byte) const { return byte_encoder_[byte]; }
    // Inverse of byte_symbol for one printable code point; -1 if unmapped.
    int symbol_byte(char32_t symbol) const;

private:
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_ranks_;
    std::size_t merge_count_ = 0;
    std::array<std::string, 256> byte_encoder_;
    std::unordered_map<char32_t, std::uint8_t> byte_decoder_;
};

struct ByteSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    bool operator==(const ByteSpan&) const = default;
};

struct TokenizedText {
    std::string text;
    std::vector<TokenId> ids;
    // Byte offsets into the UTF-8 text, one per token, contiguous.
    std::vector<ByteSpan> offsets;
};

// Reads vocab.json (token -> id) and merges.txt (header line, then "A B").
BpeTables load_bpe(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path);

// Splits text the way GPT-2's pre-tokenization pattern does; returns byte
// ranges of the pieces. Exposed for testing.
std::vector<ByteSpan> pretokenize(std::string_view text);

TokenizedText encode(const BpeTables& tables, std::string_view text);
std::string decode(const BpeTables& tables, std::span<const TokenId> ids);

// Decoded text of a single token (may be a partial UTF-8 sequence).
std::string token_text(const BpeTables& tables, TokenId id);

} // namespace causalscope
