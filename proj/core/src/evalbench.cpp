#include "frboost/evalbench.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "frboost/errors.hpp"
#include "frboost/image.hpp"

namespace frboost::eval {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Protocol containers.
// ---------------------------------------------------------------------------

int64_t GroupPairs::negative_count() const {
  if (has_implicit_negatives()) {
    int64_t n = static_cast<int64_t>(negative_representatives.size());
    return n * (n - 1) / 2;
  }
  return static_cast<int64_t>(negatives.size());
}

const GroupPairs* PairProtocol::find_group(const std::string& group_id) const {
  for (const GroupPairs& g : groups)
    if (g.group_id == group_id) return &g;
  return nullptr;
}

int64_t PairProtocol::total_pairs() const {
  int64_t total = 0;
  for (const GroupPairs& g : groups)
    total += static_cast<int64_t>(g.positives.size()) + g.negative_count();
  return total;
}

// ---------------------------------------------------------------------------
// Consensus group assignment.
// ---------------------------------------------------------------------------

std::optional<int> consensus_from_votes(const std::vector<int>& votes, double majority) {
  if (votes.empty()) return std::nullopt;
  std::map<int, int64_t> counts;
  for (int v : votes) ++counts[v];
  auto top = std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
    return a.second < b.second;
  });
  // The 1e-9 slack keeps exact fractions like 16/20 >= 0.8 safe from rounding.
  if (static_cast<double>(top->second) + 1e-9 >= majority * static_cast<double>(votes.size()))
    return top->first;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Protocol builders.
// ---------------------------------------------------------------------------

namespace {

std::pair<std::string, std::string> norm_refs(const std::string& a, const std::string& b) {
  return a <= b ? std::make_pair(a, b) : std::make_pair(b, a);
}

// Draws `want` duplicate-free positive pairs from one person's images. With
// reuse_first = false every pair gets a distinct first image. Greedy with
// whole-person retries; the feasibility checks above make a persistent
// dead-end practically impossible.
std::vector<std::pair<std::string, std::string>> person_positive_pairs(
    const std::vector<std::string>& images, int want, bool reuse_first, Rng& rng,
    const std::string& group_id, const std::string& person_id) {
  const int64_t k = static_cast<int64_t>(images.size());
  const int64_t max_pairs = k * (k - 1) / 2;
  if (want > max_pairs)
    throw ProtocolError("group '" + group_id + "': person '" + person_id + "' has " +
                        std::to_string(k) + " images (" + std::to_string(max_pairs) +
                        " distinct pairs), cannot draw " + std::to_string(want) +
                        " positive pairs");
  if (!reuse_first && want > k)
    throw ProtocolError("group '" + group_id + "': person '" + person_id + "' has " +
                        std::to_string(k) + " images, cannot draw " + std::to_string(want) +
                        " positive pairs without reusing a first image");

  for (int attempt = 0; attempt < 32; ++attempt) {
    std::vector<std::pair<std::string, std::string>> out;
    std::set<std::pair<int64_t, int64_t>> used;
    std::vector<int64_t> firsts;
    if (!reuse_first) firsts = rng.permutation(k);
    bool dead_end = false;
    for (int p = 0; p < want && !dead_end; ++p) {
      auto second_for = [&](int64_t a) -> int64_t {
        int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(k)));
        for (int64_t off = 0; off < k; ++off) {
          int64_t cand = (start + off) % k;
          if (cand == a) continue;
          if (!used.count({std::min(a, cand), std::max(a, cand)})) return cand;
        }
        return -1;
      };
      int64_t a = -1, b = -1;
      if (reuse_first) {
        int64_t astart = static_cast<int64_t>(rng.below(static_cast<uint64_t>(k)));
        for (int64_t off = 0; off < k && b < 0; ++off) {
          int64_t cand = (astart + off) % k;
          b = second_for(cand);
          if (b >= 0) a = cand;
        }
      } else {
        a = firsts[static_cast<size_t>(p)];
        b = second_for(a);
      }
      if (b < 0) {
        dead_end = true;
        break;
      }
      used.insert({std::min(a, b), std::max(a, b)});
      out.emplace_back(images[static_cast<size_t>(a)], images[static_cast<size_t>(b)]);
    }
    if (!dead_end) return out;
  }
  throw ProtocolError("group '" + group_id + "': person '" + person_id +
                      "' exhausted pair sampling attempts");
}

}  // namespace

PairProtocol build_rbweb_protocol(const GroupedPeople& grouped, int n_people_per_group,
                                  int pos_per_person, Rng& rng, bool reuse_first_image) {
  if (n_people_per_group < 1) throw std::invalid_argument("build_rbweb_protocol: need >= 1 person per group");
  if (pos_per_person < 0) throw std::invalid_argument("build_rbweb_protocol: pos_per_person must be >= 0");

  PairProtocol proto;
  for (const auto& [group_id, people] : grouped) {
    std::vector<const PersonImages*> eligible;
    for (const PersonImages& p : people)
      if (p.images.size() >= 2) eligible.push_back(&p);
    if (static_cast<int64_t>(eligible.size()) < n_people_per_group)
      throw ProtocolError("group '" + group_id + "': only " + std::to_string(eligible.size()) +
                          " people with >= 2 images, need " + std::to_string(n_people_per_group));

    std::vector<int64_t> order = rng.permutation(static_cast<int64_t>(eligible.size()));
    GroupPairs gp;
    gp.group_id = group_id;
    for (int i = 0; i < n_people_per_group; ++i) {
      const PersonImages& person = *eligible[static_cast<size_t>(order[static_cast<size_t>(i)])];
      auto pairs = person_positive_pairs(person.images, pos_per_person, reuse_first_image, rng,
                                         group_id, person.person_id);
      gp.positives.insert(gp.positives.end(), pairs.begin(), pairs.end());
      gp.negative_representatives.push_back(
          person.images[rng.below(static_cast<uint64_t>(person.images.size()))]);
    }
    proto.groups.push_back(std::move(gp));
  }
  return proto;
}

PairProtocol build_rfw_style_protocol(const GroupedPeople& grouped, int n_pairs,
                                      const SimilarityFn& similarity, Rng& rng,
                                      int candidate_factor) {
  if (n_pairs < 0) throw std::invalid_argument("build_rfw_style_protocol: n_pairs must be >= 0");
  if (candidate_factor < 1)
    throw std::invalid_argument("build_rfw_style_protocol: candidate_factor must be >= 1");
  if (!similarity) throw std::invalid_argument("build_rfw_style_protocol: similarity fn required");

  PairProtocol proto;
  for (const auto& [group_id, people] : grouped) {
    GroupPairs gp;
    gp.group_id = group_id;

    // --- positives ---
    std::vector<const PersonImages*> eligible;
    int64_t possible = 0;
    for (const PersonImages& p : people)
      if (p.images.size() >= 2) {
        eligible.push_back(&p);
        int64_t k = static_cast<int64_t>(p.images.size());
        possible += k * (k - 1) / 2;
      }
    if (possible < n_pairs)
      throw ProtocolError("group '" + group_id + "': " + std::to_string(possible) +
                          " distinct positive pairs available, need " + std::to_string(n_pairs));

    std::set<std::pair<std::string, std::string>> used;
    int64_t attempts = 0;
    const int64_t max_attempts = 64 * static_cast<int64_t>(n_pairs) + 64;
    while (static_cast<int64_t>(gp.positives.size()) < n_pairs && attempts < max_attempts) {
      ++attempts;
      const PersonImages& person =
          *eligible[rng.below(static_cast<uint64_t>(eligible.size()))];
      int64_t k = static_cast<int64_t>(person.images.size());
      int64_t a = static_cast<int64_t>(rng.below(static_cast<uint64_t>(k)));
      int64_t b = static_cast<int64_t>(rng.below(static_cast<uint64_t>(k - 1)));
      if (b >= a) ++b;
      const std::string& ia = person.images[static_cast<size_t>(a)];
      const std::string& ib = person.images[static_cast<size_t>(b)];
      if (used.insert(norm_refs(ia, ib)).second) gp.positives.emplace_back(ia, ib);
    }
    if (static_cast<int64_t>(gp.positives.size()) < n_pairs) {
      // Deterministic fill from the full enumeration, shuffled.
      std::vector<std::pair<std::string, std::string>> rest;
      for (const PersonImages* p : eligible)
        for (size_t i = 0; i < p->images.size(); ++i)
          for (size_t j = i + 1; j < p->images.size(); ++j)
            if (!used.count(norm_refs(p->images[i], p->images[j])))
              rest.emplace_back(p->images[i], p->images[j]);
      std::vector<int64_t> order = rng.permutation(static_cast<int64_t>(rest.size()));
      for (int64_t t = 0; static_cast<int64_t>(gp.positives.size()) < n_pairs; ++t) {
        const auto& pr = rest[static_cast<size_t>(order[static_cast<size_t>(t)])];
        used.insert(norm_refs(pr.first, pr.second));
        gp.positives.push_back(pr);
      }
    }

    // --- negatives: highest-similarity cross-person candidates ---
    if (n_pairs > 0 && people.size() < 2)
      throw ProtocolError("group '" + group_id + "': need >= 2 people for negative pairs");
    int64_t total_cross = 0;
    for (size_t p = 0; p < people.size(); ++p)
      for (size_t q = p + 1; q < people.size(); ++q)
        total_cross +=
            static_cast<int64_t>(people[p].images.size()) * static_cast<int64_t>(people[q].images.size());
    if (total_cross < n_pairs)
      throw ProtocolError("group '" + group_id + "': " + std::to_string(total_cross) +
                          " distinct cross-person pairs available, need " + std::to_string(n_pairs));

    const int64_t target_c =
        std::min<int64_t>(static_cast<int64_t>(candidate_factor) * n_pairs, total_cross);
    std::set<std::pair<std::string, std::string>> cands;
    if (target_c >= total_cross) {
      for (size_t p = 0; p < people.size(); ++p)
        for (size_t q = p + 1; q < people.size(); ++q)
          for (const auto& ia : people[p].images)
            for (const auto& ib : people[q].images) cands.insert(norm_refs(ia, ib));
    } else {
      int64_t cand_attempts = 0;
      const int64_t cand_max = 32 * target_c + 64;
      while (static_cast<int64_t>(cands.size()) < target_c && cand_attempts < cand_max) {
        ++cand_attempts;
        size_t p = static_cast<size_t>(rng.below(people.size()));
        size_t q = static_cast<size_t>(rng.below(people.size() - 1));
        if (q >= p) ++q;
        if (people[p].images.empty() || people[q].images.empty()) continue;
        const std::string& ia = people[p].images[rng.below(people[p].images.size())];
        const std::string& ib = people[q].images[rng.below(people[q].images.size())];
        cands.insert(norm_refs(ia, ib));
      }
      if (static_cast<int64_t>(cands.size()) < n_pairs)
        throw ProtocolError("group '" + group_id + "': only " + std::to_string(cands.size()) +
                            " distinct cross-person candidates for " + std::to_string(n_pairs) +
                            " negatives");
    }

    std::vector<std::pair<double, std::pair<std::string, std::string>>> scored;
    scored.reserve(cands.size());
    for (const auto& pr : cands) scored.push_back({similarity(pr.first, pr.second), pr});
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
      return x.first != y.first ? x.first > y.first : x.second < y.second;
    });
    for (int64_t i = 0; i < n_pairs; ++i)
      gp.negatives.push_back(scored[static_cast<size_t>(i)].second);

    proto.groups.push_back(std::move(gp));
  }
  return proto;
}

// ---------------------------------------------------------------------------
// Protocol files.
// ---------------------------------------------------------------------------

void write_pairs_tsv(const PairProtocol& protocol, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IngestError("cannot write pair file '" + file.string() + "'");
  for (const GroupPairs& g : protocol.groups) {
    for (const auto& [a, b] : g.positives) out << a << '\t' << b << "\t1\t" << g.group_id << '\n';
    for (const auto& [a, b] : g.negatives) out << a << '\t' << b << "\t0\t" << g.group_id << '\n';
  }
}

PairProtocol read_pairs_tsv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IngestError("cannot open pair file '" + file.string() + "'");
  PairProtocol proto;
  std::map<std::string, size_t> group_of;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    for (size_t t = line.find('\t'); t != std::string::npos; t = line.find('\t', start)) {
      cols.push_back(line.substr(start, t - start));
      start = t + 1;
    }
    cols.push_back(line.substr(start));
    if (cols.size() != 4)
      throw IngestError(file.string() + ":" + std::to_string(lineno) +
                        ": expected 4 tab-separated fields, got " + std::to_string(cols.size()));
    if (cols[2] != "0" && cols[2] != "1")
      throw IngestError(file.string() + ":" + std::to_string(lineno) + ": label must be 0 or 1, got '" +
                        cols[2] + "'");
    auto [it, fresh] = group_of.try_emplace(cols[3], proto.groups.size());
    if (fresh) {
      GroupPairs g;
      g.group_id = cols[3];
      proto.groups.push_back(std::move(g));
    }
    GroupPairs& g = proto.groups[it->second];
    if (cols[2] == "1")
      g.positives.emplace_back(cols[0], cols[1]);
    else
      g.negatives.emplace_back(cols[0], cols[1]);
  }
  return proto;
}

void save_protocol(const PairProtocol& protocol, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_pairs_tsv(protocol, dir / "pairs.tsv");
  for (const GroupPairs& g : protocol.groups) {
    if (!g.has_implicit_negatives()) continue;
    json j{{"group_id", g.group_id},
           {"representative_images", g.negative_representatives},
           {"seed", protocol.seed}};
    std::ofstream out(dir / ("implicit_" + g.group_id + ".json"));
    if (!out) throw IngestError("cannot write implicit descriptor for group '" + g.group_id + "'");
    out << j.dump(2) << '\n';
  }
}

PairProtocol load_protocol(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw IngestError("protocol directory '" + dir.string() + "' does not exist");
  PairProtocol proto;
  if (std::filesystem::exists(dir / "pairs.tsv")) proto = read_pairs_tsv(dir / "pairs.tsv");

  std::vector<std::filesystem::path> descriptors;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("implicit_", 0) == 0 && entry.path().extension() == ".json")
      descriptors.push_back(entry.path());
  }
  std::sort(descriptors.begin(), descriptors.end());
  for (const auto& path : descriptors) {
    std::ifstream in(path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw IngestError("bad implicit descriptor '" + path.string() + "': " + e.what());
    }
    std::string gid = j.at("group_id").get<std::string>();
    GroupPairs* g = nullptr;
    for (GroupPairs& existing : proto.groups)
      if (existing.group_id == gid) g = &existing;
    if (g == nullptr) {
      proto.groups.push_back(GroupPairs{});
      g = &proto.groups.back();
      g->group_id = gid;
    }
    g->negative_representatives = j.at("representative_images").get<std::vector<std::string>>();
    proto.seed = j.at("seed").get<uint64_t>();
  }
  if (proto.groups.empty())
    throw IngestError("no protocol files found in '" + dir.string() + "'");
  return proto;
}

// ---------------------------------------------------------------------------
// EMB1 cache.
// ---------------------------------------------------------------------------

void EmbeddingTable::add(std::string id, const Tensor& embedding) {
  if (embedding.ndim() != 1 || embedding.numel() == 0)
    throw std::invalid_argument("EmbeddingTable::add: embedding must be a nonempty vector, got " +
                                embedding.shape_str());
  if (index.count(id)) throw std::invalid_argument("EmbeddingTable::add: duplicate id '" + id + "'");
  if (mat.empty()) {
    mat = Tensor({0, static_cast<int>(embedding.numel())});
  } else if (embedding.numel() != mat.shape[1]) {
    throw std::invalid_argument("EmbeddingTable::add: dimension mismatch for '" + id + "'");
  }
  index.emplace(id, static_cast<int64_t>(ids.size()));
  ids.push_back(std::move(id));
  mat.d.insert(mat.d.end(), embedding.d.begin(), embedding.d.end());
  mat.shape[0] = static_cast<int>(ids.size());
}

const double* EmbeddingTable::row(const std::string& id) const {
  auto it = index.find(id);
  if (it == index.end()) return nullptr;
  return mat.data() + it->second * dim();
}

namespace {

void put_u32le(std::ostream& out, uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

uint32_t get_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

void write_emb1(const std::filesystem::path& file, const EmbeddingTable& table) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IngestError("cannot write embedding cache '" + file.string() + "'");
  out.write("EMB1", 4);
  put_u32le(out, static_cast<uint32_t>(table.count()));
  put_u32le(out, static_cast<uint32_t>(table.dim()));
  put_u32le(out, 0);  // reserved
  for (double v : table.mat.d) put_u32le(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
  for (const std::string& id : table.ids) out.write(id.c_str(), static_cast<std::streamsize>(id.size()) + 1);
  if (!out) throw IngestError("short write to embedding cache '" + file.string() + "'");
}

EmbeddingTable read_emb1(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestError("cannot open embedding cache '" + file.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != "EMB1")
    throw IngestError("'" + file.string() + "' is not an EMB1 embedding cache");
  const uint32_t count = get_u32le(bytes.data() + 4);
  const uint32_t dim = get_u32le(bytes.data() + 8);
  const size_t payload = static_cast<size_t>(count) * dim * 4;
  if (bytes.size() < 16 + payload)
    throw IngestError("embedding cache '" + file.string() + "' is truncated");

  EmbeddingTable table;
  table.mat = Tensor({static_cast<int>(count), static_cast<int>(dim)});
  for (size_t i = 0; i < static_cast<size_t>(count) * dim; ++i)
    table.mat.d[i] = static_cast<double>(std::bit_cast<float>(get_u32le(bytes.data() + 16 + 4 * i)));

  size_t off = 16 + payload;
  for (uint32_t i = 0; i < count; ++i) {
    size_t end = off;
    while (end < bytes.size() && bytes[end] != '\0') ++end;
    if (end >= bytes.size())
      throw IngestError("embedding cache '" + file.string() + "' has a truncated id table");
    std::string id(reinterpret_cast<const char*>(bytes.data() + off), end - off);
    if (!table.index.emplace(id, static_cast<int64_t>(i)).second)
      throw IngestError("embedding cache '" + file.string() + "' has duplicate id '" + id + "'");
    table.ids.push_back(std::move(id));
    off = end + 1;
  }
  if (off != bytes.size())
    throw IngestError("embedding cache '" + file.string() + "' has trailing data");
  return table;
}

// ---------------------------------------------------------------------------
// Pair scoring.
// ---------------------------------------------------------------------------

namespace {

// Embeds each image ref once and keeps the l2-normalized vector.
class CachedEmbedder {
 public:
  explicit CachedEmbedder(const EmbedFn& fn) : fn_(fn) {}

  const std::vector<double>& get(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    Tensor e = fn_(id);
    if (e.ndim() != 1 || e.numel() == 0)
      throw ScoringError("embedding for '" + id + "' must be a nonempty vector, got " +
                         e.shape_str());
    std::vector<double> v = e.d;
    double n2 = 0;
    for (double x : v) n2 += x * x;
    const double n = std::sqrt(n2);
    if (n > 0)
      for (double& x : v) x /= n;
    return cache_.emplace(id, std::move(v)).first->second;
  }

 private:
  const EmbedFn& fn_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

double pair_score(CachedEmbedder& emb, const std::string& a, const std::string& b,
                  const std::string& group_id) {
  try {
    const std::vector<double>& va = emb.get(a);
    const std::vector<double>& vb = emb.get(b);
    if (va.size() != vb.size()) throw ScoringError("embedding dimension mismatch");
    double dot = 0;
    for (size_t i = 0; i < va.size(); ++i) dot += va[i] * vb[i];
    return std::clamp(dot, -1.0, 1.0);
  } catch (const std::exception& e) {
    throw ScoringError("group '" + group_id + "': cannot score pair ('" + a + "', '" + b +
                       "'): " + e.what());
  }
}

}  // namespace

ScoreMap score_pairs(const EmbedFn& embed, const PairProtocol& protocol, int chunk_size) {
  if (chunk_size < 1) throw std::invalid_argument("score_pairs: chunk_size must be >= 1");
  if (!embed) throw std::invalid_argument("score_pairs: embed fn required");
  CachedEmbedder cache(embed);
  ScoreMap out;
  for (const GroupPairs& g : protocol.groups) {
    GroupScores gs;
    gs.group_id = g.group_id;
    gs.pos.reserve(g.positives.size());
    for (const auto& [a, b] : g.positives) gs.pos.push_back(pair_score(cache, a, b, g.group_id));
    if (!g.has_implicit_negatives()) {
      gs.neg.reserve(g.negatives.size());
      for (const auto& [a, b] : g.negatives) gs.neg.push_back(pair_score(cache, a, b, g.group_id));
    } else {
      // Stream the exhaustive cross-person expansion in lexicographic (i, j)
      // order, chunk_size pairs at a time, never materializing the pair list.
      const auto& reps = g.negative_representatives;
      const int64_t n = static_cast<int64_t>(reps.size());
      const int64_t total = n * (n - 1) / 2;
      gs.neg.reserve(static_cast<size_t>(total));
      int64_t i = 0, j = 1, done = 0;
      while (done < total) {
        const int64_t stop = std::min<int64_t>(done + chunk_size, total);
        for (; done < stop; ++done) {
          gs.neg.push_back(pair_score(cache, reps[static_cast<size_t>(i)],
                                      reps[static_cast<size_t>(j)], g.group_id));
          if (++j == n) {
            ++i;
            j = i + 1;
          }
        }
      }
    }
    out.emplace(g.group_id, std::move(gs));
  }
  return out;
}

ScoreMap score_pairs(fr::BackboneParams& backbone, const PairProtocol& protocol, int chunk_size) {
  EmbedFn fn = [&backbone](const std::string& path) {
    return fr::embed(backbone, load_image(path));
  };
  return score_pairs(fn, protocol, chunk_size);
}

ScoreMap score_pairs(const EmbeddingTable& table, const PairProtocol& protocol, int chunk_size) {
  EmbedFn fn = [&table](const std::string& id) {
    const double* r = table.row(id);
    if (r == nullptr) throw ScoringError("image id '" + id + "' not in embedding cache");
    Tensor t({static_cast<int>(table.dim())});
    std::copy(r, r + table.dim(), t.data());
    return t;
  };
  return score_pairs(fn, protocol, chunk_size);
}

// ---------------------------------------------------------------------------
// LFW-style accuracy.
// ---------------------------------------------------------------------------

namespace {

struct ThresholdRule {
  double threshold = 0;
  bool flipped = false;  // false: predict positive iff score >= threshold
};

bool rule_predicts_positive(const ThresholdRule& r, double s) {
  return r.flipped ? s < r.threshold : s >= r.threshold;
}

// Best accuracy rule over (score, is_positive) items, both directions, ties
// resolved toward the smallest threshold and the unflipped direction.
std::pair<ThresholdRule, double> best_rule(std::vector<std::pair<double, bool>> items) {
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  const int64_t total = static_cast<int64_t>(items.size());
  int64_t total_pos = 0;
  for (const auto& [s, is_pos] : items) total_pos += is_pos;

  ThresholdRule best;
  int64_t best_correct = -1;
  int64_t pos_below = 0, neg_below = 0;
  auto consider = [&](double t) {
    const int64_t correct_ge = (total_pos - pos_below) + neg_below;
    if (correct_ge > best_correct) {
      best_correct = correct_ge;
      best = {t, false};
    }
    if (total - correct_ge > best_correct) {
      best_correct = total - correct_ge;
      best = {t, true};
    }
  };
  size_t i = 0;
  while (i < items.size()) {
    const double v = items[i].first;
    consider(v);
    while (i < items.size() && items[i].first == v) {
      items[i].second ? ++pos_below : ++neg_below;
      ++i;
    }
  }
  consider(std::numeric_limits<double>::infinity());
  return {best, 100.0 * static_cast<double>(best_correct) / static_cast<double>(total)};
}

// Fold id per element: contiguous blocks over a shuffled order whose seed
// depends only on the score content, keeping fold assignment invariant under
// a pos/neg label swap.
std::vector<int> fold_assignment(const std::vector<double>& scores, int folds, uint64_t seed) {
  const uint64_t content = fnv1a64(std::string_view(
      reinterpret_cast<const char*>(scores.data()), scores.size() * sizeof(double)));
  Rng rng(derive_seed(seed, "lfw-folds:" + std::to_string(content)));
  std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(scores.size()));
  std::vector<int> fold(scores.size(), 0);
  const int64_t n = static_cast<int64_t>(scores.size());
  int64_t idx = 0;
  for (int k = 0; k < folds; ++k) {
    int64_t size = n / folds + (k < n % folds ? 1 : 0);
    for (int64_t t = 0; t < size; ++t) fold[static_cast<size_t>(perm[static_cast<size_t>(idx++)])] = k;
  }
  return fold;
}

}  // namespace

LfwAccuracy lfw_accuracy(const std::vector<double>& pos_scores,
                         const std::vector<double>& neg_scores, int folds, uint64_t seed) {
  if (pos_scores.empty() || neg_scores.empty())
    throw std::invalid_argument("lfw_accuracy: both score lists must be nonempty");
  if (folds < 2) throw std::invalid_argument("lfw_accuracy: folds must be >= 2");
  if (static_cast<int64_t>(pos_scores.size()) < folds ||
      static_cast<int64_t>(neg_scores.size()) < folds)
    throw std::invalid_argument("lfw_accuracy: each class needs at least `folds` scores");

  const std::vector<int> pos_fold = fold_assignment(pos_scores, folds, seed);
  const std::vector<int> neg_fold = fold_assignment(neg_scores, folds, seed);

  double acc_sum = 0;
  for (int k = 0; k < folds; ++k) {
    std::vector<std::pair<double, bool>> train;
    train.reserve(pos_scores.size() + neg_scores.size());
    int64_t correct = 0, held_out = 0;
    for (size_t i = 0; i < pos_scores.size(); ++i)
      if (pos_fold[i] != k) train.push_back({pos_scores[i], true});
    for (size_t i = 0; i < neg_scores.size(); ++i)
      if (neg_fold[i] != k) train.push_back({neg_scores[i], false});
    const ThresholdRule rule = best_rule(std::move(train)).first;
    for (size_t i = 0; i < pos_scores.size(); ++i)
      if (pos_fold[i] == k) {
        correct += rule_predicts_positive(rule, pos_scores[i]);
        ++held_out;
      }
    for (size_t i = 0; i < neg_scores.size(); ++i)
      if (neg_fold[i] == k) {
        correct += !rule_predicts_positive(rule, neg_scores[i]);
        ++held_out;
      }
    acc_sum += 100.0 * static_cast<double>(correct) / static_cast<double>(held_out);
  }

  std::vector<std::pair<double, bool>> all;
  all.reserve(pos_scores.size() + neg_scores.size());
  for (double s : pos_scores) all.push_back({s, true});
  for (double s : neg_scores) all.push_back({s, false});
  const auto [rule, best_acc] = best_rule(std::move(all));

  LfwAccuracy out;
  out.cv_accuracy = acc_sum / folds;
  out.best_threshold_accuracy = best_acc;
  out.best_threshold = rule.threshold;
  out.folds = folds;
  return out;
}

// ---------------------------------------------------------------------------
// ROC.
// ---------------------------------------------------------------------------

RocAccumulator::RocAccumulator(double range_lo, double range_hi, int steps) {
  if (!(range_lo < range_hi))
    throw std::invalid_argument("roc: range_lo must be strictly below range_hi");
  if (steps < 2) throw std::invalid_argument("roc: steps must be >= 2");
  thresholds_.resize(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i)
    thresholds_[static_cast<size_t>(i)] =
        range_lo + (range_hi - range_lo) * static_cast<double>(i) / static_cast<double>(steps - 1);
  thresholds_.back() = range_hi;  // exact endpoint
  pos_hist_.assign(static_cast<size_t>(steps) + 1, 0);
  neg_hist_.assign(static_cast<size_t>(steps) + 1, 0);
}

void RocAccumulator::add(bool positive, double score) {
  // bin = number of thresholds <= score; `score >= t` holds for exactly the
  // first `bin` thresholds, so counting by bin matches a direct comparison.
  const size_t bin = static_cast<size_t>(
      std::upper_bound(thresholds_.begin(), thresholds_.end(), score) - thresholds_.begin());
  if (positive) {
    ++pos_hist_[bin];
    ++n_pos_;
  } else {
    ++neg_hist_[bin];
    ++n_neg_;
  }
}

void RocAccumulator::add_positives(std::span<const double> scores) {
  for (double s : scores) add(true, s);
}

void RocAccumulator::add_negatives(std::span<const double> scores) {
  for (double s : scores) add(false, s);
}

RocCurve RocAccumulator::curve() const {
  if (n_pos_ == 0 || n_neg_ == 0)
    throw std::invalid_argument("roc: both score sides must be nonempty");
  RocCurve c;
  c.thresholds = thresholds_;
  c.n_pos = n_pos_;
  c.n_neg = n_neg_;
  const size_t steps = thresholds_.size();
  c.tpr.resize(steps);
  c.fpr.resize(steps);
  int64_t pos_ge = 0, neg_ge = 0;
  for (size_t i = steps; i-- > 0;) {
    pos_ge += pos_hist_[i + 1];
    neg_ge += neg_hist_[i + 1];
    c.tpr[i] = static_cast<double>(pos_ge) / static_cast<double>(n_pos_);
    c.fpr[i] = static_cast<double>(neg_ge) / static_cast<double>(n_neg_);
  }
  return c;
}

RocCurve roc_sweep(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores,
                   double range_lo, double range_hi, int steps) {
  RocAccumulator acc(range_lo, range_hi, steps);
  acc.add_positives(pos_scores);
  acc.add_negatives(neg_scores);
  return acc.curve();
}

// ---------------------------------------------------------------------------
// TPR at FPR.
// ---------------------------------------------------------------------------

TprResult tpr_at_fpr(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores,
                     double fpr_target) {
  if (!(fpr_target > 0.0 && fpr_target < 1.0))
    throw std::invalid_argument("tpr_at_fpr: target must be in (0, 1)");
  if (pos_scores.empty() || neg_scores.empty())
    throw std::invalid_argument("tpr_at_fpr: both score lists must be nonempty");

  std::vector<double> spos = pos_scores, sneg = neg_scores;
  std::sort(spos.begin(), spos.end());
  std::sort(sneg.begin(), sneg.end());
  std::vector<double> cand;
  cand.reserve(spos.size() + sneg.size());
  std::merge(spos.begin(), spos.end(), sneg.begin(), sneg.end(), std::back_inserter(cand));
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

  const double n_neg = static_cast<double>(sneg.size());
  const double n_pos = static_cast<double>(spos.size());
  auto fpr_at = [&](double t) {
    const int64_t ge =
        static_cast<int64_t>(sneg.end() - std::lower_bound(sneg.begin(), sneg.end(), t));
    return static_cast<double>(ge) / n_neg;
  };

  TprResult out;
  out.mode = "exact";
  out.resolution_warning = n_neg < 1.0 / fpr_target;
  // FPR is nonincreasing in the threshold: the partition point is the
  // smallest candidate whose FPR drops to the target.
  auto it = std::partition_point(cand.begin(), cand.end(),
                                 [&](double t) { return fpr_at(t) > fpr_target; });
  if (it == cand.end()) {
    out.tpr = 0.0;
    out.threshold = std::numeric_limits<double>::infinity();
    return out;
  }
  const double t = *it;
  const int64_t pos_ge =
      static_cast<int64_t>(spos.end() - std::lower_bound(spos.begin(), spos.end(), t));
  out.tpr = 100.0 * static_cast<double>(pos_ge) / n_pos;
  out.threshold = t;
  return out;
}

TprResult tpr_at_fpr(const RocCurve& curve, double fpr_target) {
  if (!(fpr_target > 0.0 && fpr_target < 1.0))
    throw std::invalid_argument("tpr_at_fpr: target must be in (0, 1)");
  if (curve.thresholds.empty()) throw std::invalid_argument("tpr_at_fpr: empty curve");

  TprResult out;
  out.mode = "sweep";
  out.resolution_warning =
      curve.n_neg > 0 && static_cast<double>(curve.n_neg) < 1.0 / fpr_target;
  for (size_t i = 0; i < curve.thresholds.size(); ++i) {
    if (curve.fpr[i] <= fpr_target) {
      out.tpr = 100.0 * curve.tpr[i];
      out.threshold = curve.thresholds[i];
      return out;
    }
  }
  out.tpr = 0.0;
  out.threshold = std::numeric_limits<double>::infinity();
  return out;
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

VerificationReport report(const std::map<std::string, GroupMetrics>& per_group) {
  if (per_group.empty()) throw std::invalid_argument("report: need at least one group");
  VerificationReport rep;
  rep.per_group = per_group;
  std::vector<double> accs;
  for (const auto& [gid, m] : per_group)
    if (m.accuracy) accs.push_back(*m.accuracy);
  if (!accs.empty()) {
    double mean = 0;
    for (double v : accs) mean += v;
    mean /= static_cast<double>(accs.size());
    rep.avg = mean;
    if (accs.size() > 1) {
      double ss = 0;
      for (double v : accs) ss += (v - mean) * (v - mean);
      rep.stddev = std::sqrt(ss / static_cast<double>(accs.size() - 1));
    } else {
      rep.stddev = 0.0;
    }
  }
  return rep;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string tpr_metric_name(double target) { return "tpr_at_fpr@" + fmt_double(target); }

std::string tpr_mode(const TprResult& r) {
  return r.resolution_warning ? r.mode + ";resolution-warning" : r.mode;
}

}  // namespace

std::string report_csv(const VerificationReport& rep) {
  std::ostringstream out;
  out << "group,metric,value,mode\n";
  for (const auto& [gid, m] : rep.per_group) {
    if (m.accuracy) out << gid << ",accuracy," << fmt_double(*m.accuracy) << ",cv\n";
    if (m.accuracy_best_threshold)
      out << gid << ",accuracy," << fmt_double(*m.accuracy_best_threshold) << ",best-threshold\n";
    for (const auto& [target, r] : m.tpr_at_fpr)
      out << gid << ',' << tpr_metric_name(target) << ',' << fmt_double(r.tpr) << ','
          << tpr_mode(r) << '\n';
  }
  if (rep.avg) out << "_all,accuracy_avg," << fmt_double(*rep.avg) << ",aggregate\n";
  if (rep.stddev) out << "_all,accuracy_std," << fmt_double(*rep.stddev) << ",aggregate\n";
  return out.str();
}

std::string report_json(const VerificationReport& rep) {
  json groups = json::object();
  for (const auto& [gid, m] : rep.per_group) {
    json g = json::object();
    if (m.accuracy) g["accuracy_cv"] = *m.accuracy;
    if (m.accuracy_best_threshold) g["accuracy_best_threshold"] = *m.accuracy_best_threshold;
    json trs = json::array();
    for (const auto& [target, r] : m.tpr_at_fpr)
      trs.push_back({{"target", target},
                     {"tpr", r.tpr},
                     {"threshold", r.threshold},
                     {"mode", r.mode},
                     {"warning", r.resolution_warning}});
    if (!trs.empty()) g["tpr_at_fpr"] = trs;
    groups[gid] = g;
  }
  json j{{"groups", groups}};
  if (rep.avg) j["avg"] = *rep.avg;
  if (rep.stddev) j["std"] = *rep.stddev;
  return j.dump(2);
}

void save_report(const VerificationReport& rep, const std::filesystem::path& csv_file,
                 const std::filesystem::path& json_file) {
  for (const auto& path : {csv_file, json_file})
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream csv(csv_file);
  if (!csv) throw IngestError("cannot write report '" + csv_file.string() + "'");
  csv << report_csv(rep);
  std::ofstream js(json_file);
  if (!js) throw IngestError("cannot write report '" + json_file.string() + "'");
  js << report_json(rep) << '\n';
}

}  // namespace frboost::eval
