#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "otf/core.hpp"
#include "otf/rng.hpp"

namespace otf {

struct RetrievalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VocabNode {
  std::vector<double> center;
  std::vector<int> children;      // node indices; empty iff leaf
  std::vector<FrameId> members;   // leaf only
  int parent = -1;
};

// Hierarchical k-means tree over global-descriptor space. Train offline, then
// insert registered frames and answer top-N queries by greedy descent.
class VocabTree {
 public:
  VocabTree() = default;

  int dimension() const { return dim_; }
  int branching() const { return branching_; }
  int maxDepth() const { return max_depth_; }
  const std::vector<VocabNode>& nodes() const { return nodes_; }
  bool trained() const { return !nodes_.empty(); }
  size_t memberCount() const { return member_ids_.size(); }

  // Hierarchical k-means with k-means++ seeding. Recursion stops at depth
  // `max_depth` or when a node holds fewer than `branching` points.
  static VocabTree train(const std::vector<std::vector<float>>& descriptors, int branching,
                         int max_depth, uint64_t seed) {
    if (descriptors.size() < 2) throw RetrievalError("train: need at least 2 descriptors");
    if (branching < 2) throw RetrievalError("train: branching must be >= 2");
    if (max_depth < 1) throw RetrievalError("train: depth must be >= 1");
    VocabTree tree;
    tree.dim_ = int(descriptors[0].size());
    tree.branching_ = branching;
    tree.max_depth_ = max_depth;
    for (const auto& d : descriptors)
      if (int(d.size()) != tree.dim_) throw RetrievalError("train: inconsistent descriptor dims");

    std::vector<std::vector<double>> points(descriptors.size());
    for (size_t i = 0; i < descriptors.size(); ++i)
      points[i].assign(descriptors[i].begin(), descriptors[i].end());

    SeededRng rng(seed, "kmeans");
    std::vector<int> all(points.size());
    for (size_t i = 0; i < points.size(); ++i) all[i] = int(i);

    tree.nodes_.push_back(VocabNode{centroid(points, all), {}, {}, -1});
    tree.split(0, points, all, 0, rng);
    return tree;
  }

  // Greedy descent; appends the frame to the reached leaf. Duplicate frame ids
  // are rejected.
  int insertFrame(FrameId id, const std::vector<float>& descriptor) {
    requireTrained();
    if (!member_ids_.insert(id).second)
      throw RetrievalError("insertFrame: duplicate membership for frame " + std::to_string(id));
    const int leaf = descend(descriptor);
    nodes_[leaf].members.push_back(id);
    member_descriptors_[id] = descriptor;
    return leaf;
  }

  // Greedy-descend to the query's leaf; widen toward the root until at least
  // `n` candidates are gathered; rank candidates by exact distance.
  std::vector<std::pair<FrameId, double>> retrieveTopN(const std::vector<float>& query,
                                                      int n) const {
    requireTrained();
    if (member_ids_.empty()) return {};
    int node = descend(query);
    std::vector<FrameId> candidates = collectMembers(node);
    while (int(candidates.size()) < n && nodes_[node].parent >= 0) {
      node = nodes_[node].parent;
      candidates = collectMembers(node);
    }
    std::vector<std::pair<FrameId, double>> ranked;
    ranked.reserve(candidates.size());
    for (FrameId id : candidates) {
      auto it = member_descriptors_.find(id);
      if (it == member_descriptors_.end())
        throw RetrievalError("member descriptor unknown for frame " + std::to_string(id));
      ranked.emplace_back(id, std::sqrt(distanceSq(query, it->second)));
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second < b.second;
      return a.first < b.first;
    });
    if (int(ranked.size()) > n) ranked.resize(n);
    return ranked;
  }

  // The tree stores member descriptors so the final ranking is exact.
  void rememberDescriptor(FrameId id, const std::vector<float>& d) {
    member_descriptors_[id] = d;
  }

  // --- persistence (magic OTFV1) ---

  void save(const std::string& path) const {
    requireTrained();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RetrievalError("cannot write " + path);
    out.write("OTFV1", 5);
    const uint32_t header[3] = {uint32_t(dim_), uint32_t(branching_), uint32_t(max_depth_)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    savePreorder(out, 0);
  }

  static VocabTree load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RetrievalError("cannot open " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, "OTFV1", 5) != 0) throw RetrievalError("bad tree file magic");
    uint32_t header[3];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    VocabTree tree;
    tree.dim_ = int(header[0]);
    tree.branching_ = int(header[1]);
    tree.max_depth_ = int(header[2]);
    tree.loadPreorder(in, -1);
    if (!in) throw RetrievalError("truncated tree file");
    for (const auto& node : tree.nodes_)
      for (FrameId id : node.members) tree.member_ids_.insert(id);
    return tree;
  }

  static double distanceSq(const std::vector<float>& a, const std::vector<float>& b) {
    double d = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double diff = double(a[i]) - b[i];
      d += diff * diff;
    }
    return d;
  }

 private:
  void requireTrained() const {
    if (nodes_.empty()) throw RetrievalError("tree is not trained");
  }

  int descend(const std::vector<float>& q) const {
    if (int(q.size()) != dim_) throw RetrievalError("descriptor dimension mismatch");
    int node = 0;
    while (!nodes_[node].children.empty()) {
      double best = std::numeric_limits<double>::infinity();
      int best_child = nodes_[node].children.front();
      for (int child : nodes_[node].children) {
        double d = 0;
        const auto& c = nodes_[child].center;
        for (int i = 0; i < dim_; ++i) {
          const double diff = double(q[i]) - c[i];
          d += diff * diff;
        }
        if (d < best) {  // strict: ties keep the lowest child index
          best = d;
          best_child = child;
        }
      }
      node = best_child;
    }
    return node;
  }

  std::vector<FrameId> collectMembers(int node) const {
    std::vector<FrameId> out;
    std::vector<int> stack{node};
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      out.insert(out.end(), nodes_[cur].members.begin(), nodes_[cur].members.end());
      for (int c : nodes_[cur].children) stack.push_back(c);
    }
    return out;
  }

  static std::vector<double> centroid(const std::vector<std::vector<double>>& points,
                                      const std::vector<int>& idx) {
    std::vector<double> c(points[0].size(), 0.0);
    for (int i : idx)
      for (size_t d = 0; d < c.size(); ++d) c[d] += points[i][d];
    for (auto& v : c) v /= double(idx.size());
    return c;
  }

  static double pointDistSq(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double diff = a[i] - b[i];
      d += diff * diff;
    }
    return d;
  }

  // Lloyd iterations with k-means++ seeding; empty clusters are reseeded at
  // the point farthest from its current centroid.
  static std::vector<int> kmeans(const std::vector<std::vector<double>>& points,
                                 const std::vector<int>& idx, int k,
                                 std::vector<std::vector<double>>& centers, SeededRng& rng) {
    // k-means++ seeding.
    centers.clear();
    std::vector<double> min_dist(idx.size(), std::numeric_limits<double>::infinity());
    centers.push_back(points[idx[rng.uniformInt(0, int(idx.size()) - 1)]]);
    while (int(centers.size()) < k) {
      double total = 0;
      for (size_t i = 0; i < idx.size(); ++i) {
        min_dist[i] = std::min(min_dist[i], pointDistSq(points[idx[i]], centers.back()));
        total += min_dist[i];
      }
      if (total <= 1e-24) return {};  // zero variance: no meaningful split
      double target = rng.uniform() * total;
      size_t pick = 0;
      for (size_t i = 0; i < idx.size(); ++i) {
        target -= min_dist[i];
        if (target <= 0) {
          pick = i;
          break;
        }
      }
      centers.push_back(points[idx[pick]]);
    }

    std::vector<int> assign(idx.size(), 0);
    for (int iter = 0; iter < 100; ++iter) {
      for (size_t i = 0; i < idx.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
          const double d = pointDistSq(points[idx[i]], centers[c]);
          if (d < best) {
            best = d;
            assign[i] = c;
          }
        }
      }
      std::vector<std::vector<double>> next(k, std::vector<double>(points[0].size(), 0.0));
      std::vector<int> count(k, 0);
      for (size_t i = 0; i < idx.size(); ++i) {
        count[assign[i]]++;
        for (size_t d = 0; d < next[0].size(); ++d) next[assign[i]][d] += points[idx[i]][d];
      }
      for (int c = 0; c < k; ++c) {
        if (count[c] == 0) {
          // Reseed at the point farthest from its own centroid.
          double worst = -1;
          size_t worst_i = 0;
          for (size_t i = 0; i < idx.size(); ++i) {
            const double d = pointDistSq(points[idx[i]], centers[assign[i]]);
            if (d > worst) {
              worst = d;
              worst_i = i;
            }
          }
          next[c] = points[idx[worst_i]];
          count[c] = 1;
          assign[worst_i] = c;
          for (size_t d = 0; d < next[0].size(); ++d)
            next[c][d] = points[idx[worst_i]][d];
        } else {
          for (auto& v : next[c]) v /= double(count[c]);
        }
      }
      double movement = 0;
      for (int c = 0; c < k; ++c) movement = std::max(movement, std::sqrt(pointDistSq(centers[c], next[c])));
      centers = next;
      if (movement < 1e-6) break;
    }
    // Final assignment against the final centers.
    for (size_t i = 0; i < idx.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = pointDistSq(points[idx[i]], centers[c]);
        if (d < best) {
          best = d;
          assign[i] = c;
        }
      }
    }
    return assign;
  }

  void split(int node, const std::vector<std::vector<double>>& points, const std::vector<int>& idx,
             int depth, SeededRng& rng) {
    if (depth >= max_depth_ || int(idx.size()) < branching_) return;
    std::vector<std::vector<double>> centers;
    const std::vector<int> assign = kmeans(points, idx, branching_, centers, rng);
    if (assign.empty()) return;  // degenerate (identical points): stay a leaf
    std::vector<std::vector<int>> buckets(branching_);
    for (size_t i = 0; i < idx.size(); ++i) buckets[assign[i]].push_back(idx[i]);
    for (int c = 0; c < branching_; ++c) {
      if (buckets[c].empty()) continue;
      const int child = int(nodes_.size());
      nodes_.push_back(VocabNode{centers[c], {}, {}, node});
      nodes_[node].children.push_back(child);
    }
    // Recurse after all children of this node exist (indices are stable).
    int ci = 0;
    for (int c = 0; c < branching_; ++c) {
      if (buckets[c].empty()) continue;
      split(nodes_[node].children[ci], points, buckets[c], depth + 1, rng);
      ++ci;
    }
  }

  void savePreorder(std::ofstream& out, int node) const {
    const VocabNode& n = nodes_[node];
    out.write(reinterpret_cast<const char*>(n.center.data()),
              std::streamsize(sizeof(double) * n.center.size()));
    const uint32_t nc = uint32_t(n.children.size());
    out.write(reinterpret_cast<const char*>(&nc), sizeof(nc));
    const uint32_t nm = uint32_t(n.members.size());
    out.write(reinterpret_cast<const char*>(&nm), sizeof(nm));
    for (FrameId id : n.members) {
      const int64_t v = id;
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    for (int c : n.children) savePreorder(out, c);
  }

  int loadPreorder(std::ifstream& in, int parent) {
    const int node = int(nodes_.size());
    nodes_.emplace_back();
    nodes_[node].parent = parent;
    nodes_[node].center.resize(dim_);
    in.read(reinterpret_cast<char*>(nodes_[node].center.data()),
            std::streamsize(sizeof(double) * dim_));
    uint32_t nc = 0, nm = 0;
    in.read(reinterpret_cast<char*>(&nc), sizeof(nc));
    in.read(reinterpret_cast<char*>(&nm), sizeof(nm));
    for (uint32_t i = 0; i < nm; ++i) {
      int64_t v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      nodes_[node].members.push_back(v);
    }
    for (uint32_t i = 0; i < nc; ++i) {
      const int child = loadPreorder(in, node);
      nodes_[node].children.push_back(child);
    }
    return node;
  }

  int dim_ = 0;
  int branching_ = 0;
  int max_depth_ = 0;
  std::vector<VocabNode> nodes_;
  std::set<FrameId> member_ids_;
  std::map<FrameId, std::vector<float>> member_descriptors_;
};

}  // namespace otf
