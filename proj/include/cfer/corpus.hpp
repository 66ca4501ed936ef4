// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cfer/error.hpp"
#include "cfer/ndiff/tensor.hpp"
#include "cfer/rng.hpp"

namespace cfer {

// ---------------------------------------------------------------------------
// Data model

struct Mention {
  int sent_id = 0;
  int span_start = 0; // inclusive
  int span_end = 0;   // exclusive
  std::string surface;

  bool operator==(const Mention &) const = default;
};

struct Entity {
  int entity_id = 0;
  std::vector<Mention> mentions;
  std::string entity_type;

  bool operator==(const Entity &) const = default;
};

/// Tokens of one sentence plus its dependency parse; dep_heads[j] is the
/// in-sentence index of token j's head, or -1 for a root.
struct Sentence {
  std::vector<std::string> tokens;
  std::vector<int> dep_heads;

  bool operator==(const Sentence &) const = default;
};

struct RelationFact {
  int head = 0;
  int tail = 0;
  std::string relation;
  std::vector<int> evidence;

  bool operator==(const RelationFact &) const = default;
};

struct Document {
  std::string doc_id;
  std::vector<Sentence> sentences;
  std::vector<Entity> entities;
  std::vector<RelationFact> facts;

  bool operator==(const Document &) const = default;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto &s : sentences) n += s.tokens.size();
    return n;
  }

  /// Flat index of the first token of each sentence.
  std::vector<int> sentence_offsets() const {
    std::vector<int> off;
    int acc = 0;
    for (const auto &s : sentences) {
      off.push_back(acc);
      acc += static_cast<int>(s.tokens.size());
    }
    return off;
  }
};

inline std::string lowercase(std::string s) {
  for (char &c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// ---------------------------------------------------------------------------
// Vocabularies

class RelationVocab {
public:
  RelationVocab() = default;

  explicit RelationVocab(std::vector<std::string> labels) : labels_(std::move(labels)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (!index_.emplace(labels_[i], static_cast<int>(i)).second)
        throw ValidationError("relation vocabulary: duplicate label '" + labels_[i] + "'");
    }
  }

  /// One label per line; the line number is the index. Blank lines are skipped.
  static RelationVocab load(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open relation vocabulary '" + path + "'");
    std::vector<std::string> labels;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
      if (!line.empty()) labels.push_back(line);
    }
    return RelationVocab(std::move(labels));
  }

  void save(const std::string &path) const {
    std::ofstream out(path);
    for (const auto &l : labels_) out << l << '\n';
  }

  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string> &labels() const { return labels_; }
  const std::string &label(std::size_t i) const { return labels_.at(i); }
  bool contains(const std::string &label) const { return index_.count(label) > 0; }

  int id(const std::string &label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw ValidationError("unknown relation label '" + label + "'");
    return it->second;
  }

private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

/// Word vocabulary keyed by lowercased token. Index 0 is padding, 1 unknown.
class Vocab {
public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr const char *kPadToken = "<pad>";
  static constexpr const char *kUnkToken = "<unk>";

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// Builds from the non-special entries, in order.
  explicit Vocab(const std::vector<std::string> &words) {
    add(kPadToken);
    add(kUnkToken);
    for (const auto &w : words) add(w);
  }

  /// Restores a vocabulary from its full token list (specials included).
  static Vocab from_tokens(const std::vector<std::string> &tokens) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
      throw ValidationError("vocabulary must start with <pad>, <unk>");
    return Vocab(std::vector<std::string>(tokens.begin() + 2, tokens.end()));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string> &tokens() const { return tokens_; }

  int id(const std::string &token) const {
    auto it = index_.find(lowercase(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string &token) const { return index_.count(token) > 0; }

private:
  void add(const std::string &w) {
    if (!index_.emplace(w, static_cast<int>(tokens_.size())).second)
      throw ValidationError("vocabulary: duplicate token '" + w + "'");
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Counts lowercased tokens and keeps those seen at least `min_freq` times,
/// ordered by descending frequency then lexicographically.
inline Vocab build_vocab(const std::vector<Document> &docs, int min_freq = 1) {
  if (min_freq < 1) throw ValidationError("build_vocab: min_freq must be >= 1");
  std::map<std::string, long> counts;
  for (const auto &d : docs)
    for (const auto &s : d.sentences)
      for (const auto &t : s.tokens) ++counts[lowercase(t)];
  std::vector<std::pair<std::string, long>> kept;
  for (auto &[tok, c] : counts)
    if (c >= min_freq && tok != Vocab::kPadToken && tok != Vocab::kUnkToken) kept.emplace_back(tok, c);
  std::stable_sort(kept.begin(), kept.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto &[tok, c] : kept) words.push_back(tok);
  return Vocab(words);
}

struct EmbeddingTable {
  nd::Tensor matrix; // [|vocab| x d_emb]
  std::size_t d_emb = 0;
};

/// Word vectors for a vocabulary. Every row is first drawn from a seeded
/// uniform on [-0.1, 0.1]; rows whose lowercased token appears in the vector
/// file are then overwritten, and the padding row is zeroed. An empty path
/// yields the purely random table.
inline EmbeddingTable load_embeddings(const std::string &path, const Vocab &vocab, std::size_t d_emb,
                                      std::uint64_t seed) {
  EmbeddingTable table{nd::Tensor({vocab.size(), d_emb}), d_emb};
  Rng rng({seed, 0x656d62ULL});
  for (double &x : table.matrix.values()) x = rng.uniform(-0.1, 0.1);
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream ls(line);
      std::string tok;
      if (!(ls >> tok)) continue;
      std::vector<double> vec;
      double v;
      while (ls >> v) vec.push_back(v);
      if (!ls.eof()) throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric vector entry");
      if (vec.size() != d_emb)
        throw ParseError(path + ":" + std::to_string(line_no) + ": vector has " + std::to_string(vec.size()) +
                         " dimensions, expected " + std::to_string(d_emb));
      const std::string key = lowercase(tok);
      if (!vocab.contains(key)) continue;
      const auto row = static_cast<std::size_t>(vocab.id(key));
      std::copy(vec.begin(), vec.end(), table.matrix.data() + row * d_emb);
    }
  }
  std::fill_n(table.matrix.data() + Vocab::kPad * d_emb, d_emb, 0.0);
  return table;
}

// ---------------------------------------------------------------------------
// Validation

namespace detail {

inline std::string mention_path(std::size_t e, std::size_t m) {
  return "vertexSet[" + std::to_string(e) + "][" + std::to_string(m) + "]";
}

/// Reports each dependency cycle of one sentence once.
inline void find_head_cycles(const std::vector<int> &heads, std::size_t sent, std::vector<std::string> &out) {
  const int n = static_cast<int>(heads.size());
  std::vector<int> state(n, 0); // 0 new, 1 on current walk, 2 done
  for (int start = 0; start < n; ++start) {
    if (state[start]) continue;
    std::vector<int> walk;
    int cur = start;
    while (cur >= 0 && cur < n && state[cur] == 0) {
      state[cur] = 1;
      walk.push_back(cur);
      const int h = heads[cur];
      cur = (h == cur) ? -1 : h; // self-heads are reported separately
    }
    if (cur >= 0 && cur < n && state[cur] == 1) {
      auto it = std::find(walk.begin(), walk.end(), cur);
      std::vector<int> cycle(it, walk.end());
      std::sort(cycle.begin(), cycle.end());
      std::string s = "dep_heads[" + std::to_string(sent) + "]: dependency cycle among tokens {";
      for (std::size_t i = 0; i < cycle.size(); ++i) s += (i ? ", " : "") + std::to_string(cycle[i]);
      out.push_back(s + "}");
    }
    for (int w : walk) state[w] = 2;
  }
}

} // namespace detail

/// Checks every Document/Sentence/Entity/Mention/RelationFact invariant and
/// returns one message per violation (empty when the document is valid).
/// Relation labels are checked only when a vocabulary is supplied.
inline std::vector<std::string> validate_document(const Document &doc, const RelationVocab *relations = nullptr) {
  std::vector<std::string> v;
  if (doc.sentences.empty()) v.push_back("sents: document has no sentences");
  for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
    const Sentence &s = doc.sentences[i];
    const std::string si = std::to_string(i);
    if (s.tokens.empty()) v.push_back("sents[" + si + "]: sentence is empty");
    if (s.dep_heads.size() != s.tokens.size()) {
      v.push_back("dep_heads[" + si + "]: length " + std::to_string(s.dep_heads.size()) + " != token count " +
                  std::to_string(s.tokens.size()));
      continue;
    }
    bool has_root = false, heads_ok = true;
    for (std::size_t j = 0; j < s.dep_heads.size(); ++j) {
      const int h = s.dep_heads[j];
      const std::string where = "dep_heads[" + si + "][" + std::to_string(j) + "]";
      if (h == -1) {
        has_root = true;
      } else if (h < -1 || h >= static_cast<int>(s.tokens.size())) {
        v.push_back(where + ": head " + std::to_string(h) + " out of range");
        heads_ok = false;
      } else if (h == static_cast<int>(j)) {
        v.push_back(where + ": token is its own head");
        heads_ok = false;
      }
    }
    if (!s.tokens.empty() && !has_root) v.push_back("dep_heads[" + si + "]: no root (-1) in sentence");
    if (heads_ok) detail::find_head_cycles(s.dep_heads, i, v);
  }
  for (std::size_t e = 0; e < doc.entities.size(); ++e) {
    const Entity &ent = doc.entities[e];
    if (ent.mentions.empty()) v.push_back("vertexSet[" + std::to_string(e) + "]: entity has no mentions");
    for (std::size_t m = 0; m < ent.mentions.size(); ++m) {
      const Mention &mn = ent.mentions[m];
      if (mn.sent_id < 0 || mn.sent_id >= static_cast<int>(doc.sentences.size())) {
        v.push_back(detail::mention_path(e, m) + ".sent_id: " + std::to_string(mn.sent_id) + " out of range");
        continue;
      }
      const int len = static_cast<int>(doc.sentences[mn.sent_id].tokens.size());
      if (!(0 <= mn.span_start && mn.span_start < mn.span_end && mn.span_end <= len))
        v.push_back(detail::mention_path(e, m) + ".pos: span [" + std::to_string(mn.span_start) + ", " +
                    std::to_string(mn.span_end) + ") outside sentence of length " + std::to_string(len));
    }
  }
  const int n_ent = static_cast<int>(doc.entities.size());
  for (std::size_t k = 0; k < doc.facts.size(); ++k) {
    const RelationFact &f = doc.facts[k];
    const std::string where = "labels[" + std::to_string(k) + "]";
    if (f.head < 0 || f.head >= n_ent) v.push_back(where + ".h: entity index " + std::to_string(f.head) + " out of range");
    if (f.tail < 0 || f.tail >= n_ent) v.push_back(where + ".t: entity index " + std::to_string(f.tail) + " out of range");
    if (f.head == f.tail) v.push_back(where + ": head and tail are the same entity");
    if (relations && !relations->contains(f.relation))
      v.push_back(where + ".r: relation '" + f.relation + "' not in relation vocabulary");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Document-collection files

inline nlohmann::json to_json(const Document &doc) {
  using nlohmann::json;
  json j;
  j["title"] = doc.doc_id;
  json sents = json::array(), heads = json::array();
  for (const auto &s : doc.sentences) {
    sents.push_back(s.tokens);
    heads.push_back(s.dep_heads);
  }
  j["sents"] = std::move(sents);
  j["dep_heads"] = std::move(heads);
  json vs = json::array();
  for (const auto &e : doc.entities) {
    json ms = json::array();
    for (const auto &m : e.mentions) {
      json mj{{"name", m.surface}, {"sent_id", m.sent_id}, {"pos", {m.span_start, m.span_end}}};
      if (!e.entity_type.empty()) mj["type"] = e.entity_type;
      ms.push_back(std::move(mj));
    }
    vs.push_back(std::move(ms));
  }
  j["vertexSet"] = std::move(vs);
  json labels = json::array();
  for (const auto &f : doc.facts) labels.push_back({{"h", f.head}, {"t", f.tail}, {"r", f.relation}, {"evidence", f.evidence}});
  j["labels"] = std::move(labels);
  return j;
}

inline Document document_from_json(const nlohmann::json &j, std::size_t record) {
  auto fail = [&](const std::string &what) -> ParseError {
    std::string title = (j.is_object() && j.contains("title") && j["title"].is_string()) ? j["title"].get<std::string>() : "";
    return ParseError("record " + std::to_string(record) + (title.empty() ? "" : " ('" + title + "')") + ": " + what);
  };
  if (!j.is_object()) throw fail("document record must be an object");
  for (const char *key : {"sents", "dep_heads", "vertexSet"})
    if (!j.contains(key)) throw fail(std::string("missing field '") + key + "'");
  Document doc;
  try {
    doc.doc_id = j.contains("title") ? j["title"].get<std::string>() : "doc" + std::to_string(record);
    const auto &sents = j["sents"];
    const auto &heads = j["dep_heads"];
    if (!sents.is_array() || !heads.is_array()) throw fail("'sents' and 'dep_heads' must be arrays");
    if (sents.size() != heads.size())
      throw fail("'dep_heads' has " + std::to_string(heads.size()) + " sentences, 'sents' has " +
                 std::to_string(sents.size()));
    for (std::size_t i = 0; i < sents.size(); ++i)
      doc.sentences.push_back({sents[i].get<std::vector<std::string>>(), heads[i].get<std::vector<int>>()});
    const auto &vs = j["vertexSet"];
    if (!vs.is_array()) throw fail("'vertexSet' must be an array");
    for (std::size_t e = 0; e < vs.size(); ++e) {
      Entity ent;
      ent.entity_id = static_cast<int>(e);
      for (const auto &m : vs[e]) {
        const auto &pos = m.at("pos");
        if (!pos.is_array() || pos.size() != 2) throw fail("mention 'pos' must be [start, end)");
        ent.mentions.push_back({m.at("sent_id").get<int>(), pos[0].get<int>(), pos[1].get<int>(),
                                m.value("name", std::string{})});
        if (ent.entity_type.empty() && m.contains("type")) ent.entity_type = m["type"].get<std::string>();
      }
      doc.entities.push_back(std::move(ent));
    }
    if (j.contains("labels")) {
      for (const auto &l : j["labels"]) {
        RelationFact f;
        f.head = l.at("h").get<int>();
        f.tail = l.at("t").get<int>();
        f.relation = l.at("r").get<std::string>();
        if (l.contains("evidence")) f.evidence = l["evidence"].get<std::vector<int>>();
        doc.facts.push_back(std::move(f));
      }
    }
  } catch (const nlohmann::json::exception &ex) {
    throw fail(ex.what());
  }
  return doc;
}

/// Parses a document collection from JSON text and validates every record.
inline std::vector<Document> parse_dataset(const std::string &text, const RelationVocab &relations,
                                           const std::string &source = "<string>") {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &ex) {
    throw ParseError(source + ": " + ex.what());
  }
  if (!root.is_array()) throw ParseError(source + ": top level must be a list of documents");
  std::vector<Document> docs;
  docs.reserve(root.size());
  for (std::size_t i = 0; i < root.size(); ++i) {
    Document d = document_from_json(root[i], i);
    auto violations = validate_document(d, &relations);
    if (!violations.empty()) {
      std::string msg = source + ": document '" + d.doc_id + "' (record " + std::to_string(i) + ") is invalid:";
      for (const auto &v : violations) msg += "\n  " + v;
      throw ValidationError(msg);
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<Document> load_dataset(const std::string &path, const RelationVocab &relations) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str(), relations, path);
}

inline std::string serialize_dataset(const std::vector<Document> &docs) {
  nlohmann::json root = nlohmann::json::array();
  for (const auto &d : docs) root.push_back(to_json(d));
  return root.dump();
}

inline void save_dataset(const std::vector<Document> &docs, const std::string &path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  out << serialize_dataset(docs) << '\n';
}

/// Sorted distinct relation labels used across a corpus.
inline RelationVocab relations_from_corpus(const nlohmann::json &root) {
  std::vector<std::string> labels;
  std::set<std::string> seen;
  for (const auto &d : root)
    if (d.contains("labels"))
      for (const auto &l : d["labels"]) {
        auto r = l.at("r").get<std::string>();
        if (seen.insert(r).second) labels.push_back(r);
      }
  std::sort(labels.begin(), labels.end());
  return RelationVocab(labels);
}

// ---------------------------------------------------------------------------
// Classification instances

struct CandidatePair {
  int head = 0;
  int tail = 0;
  std::vector<std::uint8_t> labels; // one bit per relation

  bool operator==(const CandidatePair &) const = default;
};

/// All ordered entity pairs (i, j), i != j, in row-major order, with the
/// multi-hot relation labels of the gold facts on that pair.
inline std::vector<CandidatePair> candidate_pairs(const Document &doc, const RelationVocab &relations) {
  const int p = static_cast<int>(doc.entities.size());
  std::vector<CandidatePair> pairs;
  pairs.reserve(static_cast<std::size_t>(p) * (p > 0 ? p - 1 : 0));
  std::map<std::pair<int, int>, std::size_t> slot;
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) {
      if (i == j) continue;
      slot[{i, j}] = pairs.size();
      pairs.push_back({i, j, std::vector<std::uint8_t>(relations.size(), 0)});
    }
  for (const auto &f : doc.facts) {
    auto it = slot.find({f.head, f.tail});
    if (it != slot.end()) pairs[it->second].labels[relations.id(f.relation)] = 1;
  }
  return pairs;
}

/// Display name of an entity: the surface of its first named mention.
inline std::string entity_name(const Entity &e) {
  for (const auto &m : e.mentions)
    if (!m.surface.empty()) return m.surface;
  return "";
}

} // namespace cfer
