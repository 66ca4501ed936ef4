// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "cfer/corpus.hpp"
#include "cfer/rng.hpp"

namespace cfer {

/// Generator settings for the planted-pattern corpus.
struct SyntheticSpec {
  std::size_t documents = 20;
  std::uint64_t seed = 1;
  std::size_t min_entities = 3;
  std::size_t max_entities = 5;
  std::size_t min_sentences = 3;
  std::size_t max_sentences = 5;
  std::string id_prefix = "synth";
};

namespace synth {

inline const std::vector<std::string> kNames{
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro",  "ines",  "jonas", "kemal", "lena",
    "marco", "nadia", "omar",  "petra",  "quinn", "rosa",  "sven",  "tomas", "ulla",  "vera",  "wen",   "yusuf"};

/// founded and joined state a relation inside their sentence; praised and
/// visited only matter through the verb of the following sentence.
inline const std::array<std::string, 4> kVerbs{"founded", "joined", "praised", "visited"};
inline const std::array<std::string, 4> kRelations{"founder_of", "member_of", "endorses", "follows"};

inline const std::vector<std::string> kDeterminers{"the", "a"};
inline const std::vector<std::string> kAdjectives{"old", "new", "small", "famous", "local", "quiet", "young", "busy"};
inline const std::vector<std::string> kLeadAdverbs{"later", "then", "meanwhile"};
inline const std::vector<std::string> kVerbAdverbs{"also", "once", "quickly"};

} // namespace synth

inline RelationVocab synthetic_relations() {
  return RelationVocab(std::vector<std::string>(synth::kRelations.begin(), synth::kRelations.end()));
}

/// Documents of "[adv] S [adv] V [det] [adj] O ." sentences parsed with the
/// verb as root. Facts:
///   founded / joined in sentence i        -> (S_i, founder_of / member_of, O_i)
///   praised in i followed by visited in i+1 -> (S_i, endorses, O_{i+1})
///   visited in i followed by praised in i+1 -> (S_i, follows, O_{i+1})
/// The last two are only visible along the root-to-root link between the two
/// sentences.
inline std::vector<Document> synthetic_corpus(const SyntheticSpec &spec) {
  using namespace synth;
  std::vector<Document> docs;
  for (std::size_t d = 0; d < spec.documents; ++d) {
    Rng rng({spec.seed, 0x73796e7468ULL, d});
    const std::size_t n_ent = spec.min_entities + rng.below(spec.max_entities - spec.min_entities + 1);
    const std::size_t n_sent = std::max<std::size_t>(
        spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1), (n_ent + 1) / 2);

    std::vector<std::string> pool = kNames;
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    pool.resize(n_ent);

    // Subject/object slots; every entity must fill at least one.
    std::vector<std::pair<std::size_t, std::size_t>> so;
    std::vector<std::size_t> verbs;
    for (;;) {
      so.clear();
      verbs.clear();
      std::set<std::size_t> used;
      for (std::size_t s = 0; s < n_sent; ++s) {
        const std::size_t a = rng.below(n_ent);
        std::size_t b = rng.below(n_ent - 1);
        if (b >= a) ++b;
        so.emplace_back(a, b);
        const bool chain = s > 0 && verbs.back() >= 2 && rng.bernoulli(0.5);
        verbs.push_back(chain ? 5 - verbs.back() : rng.below(kVerbs.size()));
        used.insert(a);
        used.insert(b);
      }
      if (used.size() == n_ent) break;
    }

    Document doc;
    doc.doc_id = spec.id_prefix + "-" + std::to_string(spec.seed) + "-" + std::to_string(d);
    doc.entities.resize(n_ent);
    for (std::size_t e = 0; e < n_ent; ++e) {
      doc.entities[e].entity_id = static_cast<int>(e);
      doc.entities[e].entity_type = "PER";
    }
    auto pick = [&](const std::vector<std::string> &v) { return v[rng.below(v.size())]; };
    for (std::size_t s = 0; s < n_sent; ++s) {
      Sentence sent;
      auto push = [&](const std::string &tok, int head) {
        sent.tokens.push_back(tok);
        sent.dep_heads.push_back(head);
        return static_cast<int>(sent.tokens.size()) - 1;
      };
      std::vector<int> to_verb; // tokens headed by the verb, fixed up below
      if (rng.bernoulli(0.3)) to_verb.push_back(push(pick(kLeadAdverbs), 0));
      const int subj = push(pool[so[s].first], 0);
      to_verb.push_back(subj);
      if (rng.bernoulli(0.3)) to_verb.push_back(push(pick(kVerbAdverbs), 0));
      const int verb = push(kVerbs[verbs[s]], -1);
      std::vector<int> to_obj;
      if (rng.bernoulli(0.5)) to_obj.push_back(push(pick(kDeterminers), 0));
      if (rng.bernoulli(0.4)) to_obj.push_back(push(pick(kAdjectives), 0));
      const int obj = push(pool[so[s].second], verb);
      to_verb.push_back(push(".", verb));
      for (int t : to_verb) sent.dep_heads[t] = verb;
      for (int t : to_obj) sent.dep_heads[t] = obj;
      doc.entities[so[s].first].mentions.push_back({static_cast<int>(s), subj, subj + 1, pool[so[s].first]});
      doc.entities[so[s].second].mentions.push_back({static_cast<int>(s), obj, obj + 1, pool[so[s].second]});
      doc.sentences.push_back(std::move(sent));
    }

    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> facts; // head, relation, tail
    auto add_fact = [&](std::size_t h, std::size_t r, std::size_t t, std::vector<int> ev) {
      if (h == t || !facts.insert({h, r, t}).second) return;
      doc.facts.push_back({static_cast<int>(h), static_cast<int>(t), kRelations[r], std::move(ev)});
    };
    for (std::size_t s = 0; s < n_sent; ++s) {
      if (verbs[s] < 2) add_fact(so[s].first, verbs[s], so[s].second, {static_cast<int>(s)});
      if (s + 1 < n_sent && verbs[s] >= 2 && verbs[s + 1] >= 2 && verbs[s] != verbs[s + 1])
        add_fact(so[s].first, verbs[s] == 2 ? 2 : 3, so[s + 1].second, {static_cast<int>(s), static_cast<int>(s + 1)});
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

} // namespace cfer
