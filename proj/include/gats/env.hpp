#pragma once

// Toy instruction-following environment: a 7x7 grid with a cursor and three
// distinct (color, shape) objects. Instructions are "push <color> <shape> to
// <corner>" over 3 colors x 2 shapes x 4 corners = 24 templates. Pushing
// follows sokoban rules: moving into an object shoves it one cell in the
// same direction if that cell is free, otherwise nobody moves.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gats/rng.hpp"
#include "gats/tensor.hpp"

namespace gats {

// Grid/vision token vocabulary.
inline constexpr int kGridSize = 7;
inline constexpr int kCellEmpty = 0;
inline constexpr int kCellCursor = 1;
inline constexpr int kCellObjectBase = 2;  // 2..7 = object type 0..5
inline constexpr int kCellWall = 8;        // out-of-bounds in the ego view
inline constexpr int kVisionMask = 9;
inline constexpr std::size_t kVisionVocab = 10;

// Instruction vocabulary: push(0) colors(1..3) shapes(4..5) to(6)
// corners(7..10) null(11).
inline constexpr int kWordPush = 0;
inline constexpr int kWordColorBase = 1;
inline constexpr int kWordShapeBase = 4;
inline constexpr int kWordTo = 6;
inline constexpr int kWordCornerBase = 7;
inline constexpr int kWordNull = 11;
inline constexpr std::size_t kLangVocab = 12;
inline constexpr std::size_t kInstructionLen = 5;

inline constexpr int kNumColors = 3;
inline constexpr int kNumShapes = 2;
inline constexpr int kNumCorners = 4;
inline constexpr int kNumTemplates = kNumColors * kNumShapes * kNumCorners;

// Actions.
inline constexpr int kActionUp = 0;
inline constexpr int kActionDown = 1;
inline constexpr int kActionLeft = 2;
inline constexpr int kActionRight = 3;
inline constexpr int kActionStay = 4;
inline constexpr std::size_t kNumActions = 5;

inline constexpr std::size_t kHorizon = 40;

struct GridPos {
  int r = 0, c = 0;
  bool operator==(const GridPos&) const = default;
};

inline GridPos corner_pos(int corner) {
  switch (corner) {
    case 0: return {0, 0};                          // top-left
    case 1: return {0, kGridSize - 1};              // top-right
    case 2: return {kGridSize - 1, 0};              // bottom-left
    default: return {kGridSize - 1, kGridSize - 1}; // bottom-right
  }
}

// Template id <-> (color, shape, corner).
inline int template_id(int color, int shape, int corner) {
  return (color * kNumShapes + shape) * kNumCorners + corner;
}

class GridEnv {
public:
  struct Object {
    int type = 0;  // color * kNumShapes + shape
    GridPos pos;
  };

  explicit GridEnv(std::uint64_t seed) { reset(seed); }

  // Layout and instruction are a pure function of the seed.
  void reset(std::uint64_t seed) {
    seed_ = seed;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    // Instruction first (uniform over templates), then a layout containing
    // the commanded object plus two other distinct types.
    int tpl = static_cast<int>(rng.uniform_int(kNumTemplates));
    corner_ = tpl % kNumCorners;
    int target_type = tpl / kNumCorners;
    std::vector<int> others;
    for (int t = 0; t < kNumColors * kNumShapes; ++t)
      if (t != target_type) others.push_back(t);
    rng.shuffle(others);
    std::array<int, 3> types{target_type, others[0], others[1]};
    // Distinct cells for cursor + objects, none on the goal corner (so the
    // episode never starts solved).
    GridPos goal = corner_pos(corner_);
    std::vector<GridPos> taken{goal};
    auto place = [&](bool interior) {
      while (true) {
        GridPos p;
        if (interior) {
          // An object on an edge line can never be pushed off it, so the
          // commanded object spawns in the interior to keep episodes
          // solvable.
          p = {1 + static_cast<int>(rng.uniform_int(kGridSize - 2)),
               1 + static_cast<int>(rng.uniform_int(kGridSize - 2))};
        } else {
          p = {static_cast<int>(rng.uniform_int(kGridSize)),
               static_cast<int>(rng.uniform_int(kGridSize))};
        }
        bool clash = false;
        for (const auto& q : taken) clash = clash || q == p;
        if (!clash) {
          taken.push_back(p);
          return p;
        }
      }
    };
    cursor_ = place(false);
    objects_[0] = {types[0], place(true)};
    for (int i = 1; i < 3; ++i) objects_[i] = {types[i], place(false)};
    steps_ = 0;
    done_ = false;
    success_ = false;
  }

  std::uint64_t seed() const { return seed_; }
  const GridPos& cursor() const { return cursor_; }
  const std::array<Object, 3>& objects() const { return objects_; }
  const Object& target() const { return objects_[0]; }
  int goal_corner() const { return corner_; }
  GridPos goal() const { return corner_pos(corner_); }
  std::size_t steps() const { return steps_; }
  bool done() const { return done_; }
  bool success() const { return success_; }

  std::vector<int> instruction() const {
    int color = objects_[0].type / kNumShapes;
    int shape = objects_[0].type % kNumShapes;
    return {kWordPush, kWordColorBase + color, kWordShapeBase + shape,
            kWordTo, kWordCornerBase + corner_};
  }

  int instruction_template() const {
    return template_id(objects_[0].type / kNumShapes,
                       objects_[0].type % kNumShapes, corner_);
  }

  int cell(int r, int c) const {
    if (r < 0 || r >= kGridSize || c < 0 || c >= kGridSize) return kCellWall;
    if (cursor_ == GridPos{r, c}) return kCellCursor;
    for (const auto& o : objects_)
      if (o.pos == GridPos{r, c}) return kCellObjectBase + o.type;
    return kCellEmpty;
  }

  // Global view: 49 row-major cell tokens.
  std::vector<int> observation() const {
    std::vector<int> obs;
    obs.reserve(kGridSize * kGridSize);
    for (int r = 0; r < kGridSize; ++r)
      for (int c = 0; c < kGridSize; ++c) obs.push_back(cell(r, c));
    return obs;
  }

  // Egocentric 3x3 view centered on the cursor; out-of-bounds cells read as
  // wall tokens.
  std::vector<int> ego_observation() const {
    std::vector<int> obs;
    obs.reserve(9);
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc)
        obs.push_back(cell(cursor_.r + dr, cursor_.c + dc));
    return obs;
  }

  bool occupied_by_object(const GridPos& p) const {
    for (const auto& o : objects_)
      if (o.pos == p) return true;
    return false;
  }

  bool in_bounds(const GridPos& p) const {
    return p.r >= 0 && p.r < kGridSize && p.c >= 0 && p.c < kGridSize;
  }

  void step(int action) {
    if (done_) return;
    if (action < 0 || action >= static_cast<int>(kNumActions))
      throw Error("config", "GridEnv: bad action " + std::to_string(action));
    int dr = 0, dc = 0;
    if (action == kActionUp) dr = -1;
    if (action == kActionDown) dr = 1;
    if (action == kActionLeft) dc = -1;
    if (action == kActionRight) dc = 1;
    if (dr != 0 || dc != 0) {
      GridPos next{cursor_.r + dr, cursor_.c + dc};
      if (in_bounds(next)) {
        Object* obj = nullptr;
        for (auto& o : objects_)
          if (o.pos == next) obj = &o;
        if (obj == nullptr) {
          cursor_ = next;
        } else {
          GridPos shoved{next.r + dr, next.c + dc};
          if (in_bounds(shoved) && !occupied_by_object(shoved)) {
            obj->pos = shoved;
            cursor_ = next;
          }
        }
      }
    }
    ++steps_;
    if (objects_[0].pos == goal()) {
      done_ = true;
      success_ = true;
    } else if (steps_ >= kHorizon) {
      done_ = true;
    }
  }

private:
  std::uint64_t seed_ = 0;
  GridPos cursor_;
  std::array<Object, 3> objects_;  // [0] is the commanded object
  int corner_ = 0;
  std::size_t steps_ = 0;
  bool done_ = false;
  bool success_ = false;
};

// ---------------------------------------------------------------------------
// Scripted expert: a greedy push policy. Pick the push direction toward the
// goal, preferring the vertical axis over the horizontal one; if that push is
// blocked (a bystander object sits in the shove cell or on the standing
// cell), fall back to the other axis. Then either push (if the cursor already
// stands behind the object) or walk to the standing cell, routing around
// objects by breadth-first search with a fixed up/down/left/right expansion
// order so the whole policy is deterministic. Replanning happens every step.

inline int direction_action(int dr, int dc) {
  if (dr == -1) return kActionUp;
  if (dr == 1) return kActionDown;
  if (dc == -1) return kActionLeft;
  if (dc == 1) return kActionRight;
  return kActionStay;
}

namespace detail {

// First action of the shortest cursor walk from `from` to `to` that never
// enters an object cell; -1 when unreachable. Fixed expansion order makes
// the tie-breaking deterministic.
inline int first_step_to(const GridEnv& env, GridPos from, GridPos to) {
  constexpr int kDr4[4] = {-1, 1, 0, 0};
  constexpr int kDc4[4] = {0, 0, -1, 1};
  auto cell = [](GridPos p) { return p.r * kGridSize + p.c; };
  std::array<int, kGridSize * kGridSize> first;
  first.fill(-2);
  first[cell(from)] = kActionStay;
  std::vector<GridPos> frontier{from};
  while (!frontier.empty()) {
    std::vector<GridPos> next_frontier;
    for (const auto& c : frontier) {
      int via = first[cell(c)];
      for (int dir = 0; dir < 4; ++dir) {
        GridPos nc{c.r + kDr4[dir], c.c + kDc4[dir]};
        if (!env.in_bounds(nc) || env.occupied_by_object(nc)) continue;
        int& slot = first[cell(nc)];
        if (slot != -2) continue;
        slot = via == kActionStay ? direction_action(kDr4[dir], kDc4[dir])
                                  : via;
        if (nc == to) return slot;
        next_frontier.push_back(nc);
      }
    }
    frontier = std::move(next_frontier);
  }
  return -1;
}

}  // namespace detail

inline int scripted_expert(const GridEnv& env) {
  const GridPos obj = env.target().pos;
  const GridPos goal = env.goal();
  if (obj == goal) return kActionStay;
  auto bystander = [&](GridPos p) {
    for (std::size_t i = 1; i < env.objects().size(); ++i)
      if (env.objects()[i].pos == p) return true;
    return false;
  };
  // Candidate push directions, vertical before horizontal.
  std::vector<std::pair<int, int>> dirs;
  if (obj.r != goal.r) dirs.push_back({goal.r > obj.r ? 1 : -1, 0});
  if (obj.c != goal.c) dirs.push_back({0, goal.c > obj.c ? 1 : -1});
  // A push that finishes its axis strands the object on the goal's edge
  // line; from there only the other axis remains, and a bystander anywhere
  // on the stretch still to be traversed (or on the first standing cell,
  // one beyond the landing point) deadlocks the episode. Defer such pushes
  // while another axis is open.
  auto deadlocks = [&](int dr, int dc) {
    GridPos land{obj.r + dr, obj.c + dc};
    if (land == goal) return false;
    if (land.r != goal.r && land.c != goal.c) return false;
    int lr = land.r == goal.r ? 0 : (goal.r > land.r ? 1 : -1);
    int lc = land.c == goal.c ? 0 : (goal.c > land.c ? 1 : -1);
    for (GridPos p{land.r - lr, land.c - lc}; !(p == goal);
         p = {p.r + lr, p.c + lc})
      if (env.in_bounds(p) && bystander(p)) return true;
    return false;
  };
  auto usable = [&](int dr, int dc) {
    GridPos behind{obj.r - dr, obj.c - dc};
    GridPos shove{obj.r + dr, obj.c + dc};
    if (!env.in_bounds(behind) || !env.in_bounds(shove)) return false;
    return !bystander(behind) && !bystander(shove);
  };
  // First pass avoids deadlocking pushes; the fallback pass takes any push
  // that is mechanically possible rather than stalling.
  for (int pass = 0; pass < 2; ++pass) {
    for (auto [dr, dc] : dirs) {
      if (!usable(dr, dc)) continue;
      if (pass == 0 && deadlocks(dr, dc)) continue;
      GridPos behind{obj.r - dr, obj.c - dc};
      if (env.cursor() == behind) return direction_action(dr, dc);
      int nav = detail::first_step_to(env, env.cursor(), behind);
      if (nav != -1) return nav;
    }
  }
  return kActionStay;  // every push blocked; wait out the horizon
}

// ---------------------------------------------------------------------------
// Episode records and the dataset file format (little-endian, fixed-width).
//
// File layout:
//   magic   8 bytes  "GATSDS01"
//   u32     format version (1)
//   u32     grid size (7)
//   u32     template count (24)
//   u32     episode count
//   per episode:
//     u64   seed
//     u8    success
//     u32   step count T
//     i32[5]  instruction tokens
//     per step t in 0..T-1:
//       i32[49]  global view tokens
//       u8       has_ego (1 on even steps)
//       i32[9]   ego view tokens (only if has_ego)
//       i32      expert action

struct StepRecord {
  std::vector<int> observation;  // 49 tokens
  bool has_ego = false;
  std::vector<int> ego;          // 9 tokens when present
  int action = kActionStay;
};

struct EpisodeRecord {
  std::uint64_t seed = 0;
  bool success = false;
  std::vector<int> instruction;
  std::vector<StepRecord> steps;
};

// Runs the scripted expert on the episode with the given seed.
inline EpisodeRecord run_expert_episode(std::uint64_t seed) {
  GridEnv env(seed);
  EpisodeRecord ep;
  ep.seed = seed;
  ep.instruction = env.instruction();
  while (!env.done()) {
    StepRecord s;
    s.observation = env.observation();
    s.has_ego = env.steps() % 2 == 0;  // second view at half rate
    if (s.has_ego) s.ego = env.ego_observation();
    s.action = scripted_expert(env);
    env.step(s.action);
    ep.steps.push_back(std::move(s));
  }
  ep.success = env.success();
  return ep;
}

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

inline constexpr char kDatasetMagic[8] = {'G', 'A', 'T', 'S',
                                          'D', 'S', '0', '1'};

inline void save_dataset(const std::vector<EpisodeRecord>& episodes,
                         const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("config", "save_dataset: cannot open " + path);
  out.write(kDatasetMagic, 8);
  detail::write_le<std::uint32_t>(out, 1);
  detail::write_le<std::uint32_t>(out, kGridSize);
  detail::write_le<std::uint32_t>(out, kNumTemplates);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(episodes.size()));
  for (const auto& ep : episodes) {
    detail::write_le<std::uint64_t>(out, ep.seed);
    detail::write_le<std::uint8_t>(out, ep.success ? 1 : 0);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ep.steps.size()));
    for (int t : ep.instruction) detail::write_le<std::int32_t>(out, t);
    for (const auto& s : ep.steps) {
      for (int t : s.observation) detail::write_le<std::int32_t>(out, t);
      detail::write_le<std::uint8_t>(out, s.has_ego ? 1 : 0);
      if (s.has_ego)
        for (int t : s.ego) detail::write_le<std::int32_t>(out, t);
      detail::write_le<std::int32_t>(out, s.action);
    }
  }
  if (!out) throw Error("config", "save_dataset: write failed for " + path);
}

inline std::vector<EpisodeRecord> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("config", "load_dataset: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kDatasetMagic, 8))
    throw Error("config", "load_dataset: bad magic in " + path);
  std::uint32_t version = detail::read_le<std::uint32_t>(in);
  if (version != 1)
    throw Error("config", "load_dataset: unsupported version " +
                              std::to_string(version));
  std::uint32_t grid = detail::read_le<std::uint32_t>(in);
  std::uint32_t templates = detail::read_le<std::uint32_t>(in);
  if (grid != kGridSize || templates != kNumTemplates)
    throw Error("config", "load_dataset: header mismatch");
  std::uint32_t count = detail::read_le<std::uint32_t>(in);
  std::vector<EpisodeRecord> episodes(count);
  for (auto& ep : episodes) {
    ep.seed = detail::read_le<std::uint64_t>(in);
    ep.success = detail::read_le<std::uint8_t>(in) != 0;
    std::uint32_t nsteps = detail::read_le<std::uint32_t>(in);
    ep.instruction.resize(kInstructionLen);
    for (auto& t : ep.instruction) t = detail::read_le<std::int32_t>(in);
    ep.steps.resize(nsteps);
    for (auto& s : ep.steps) {
      s.observation.resize(kGridSize * kGridSize);
      for (auto& t : s.observation) t = detail::read_le<std::int32_t>(in);
      s.has_ego = detail::read_le<std::uint8_t>(in) != 0;
      if (s.has_ego) {
        s.ego.resize(9);
        for (auto& t : s.ego) t = detail::read_le<std::int32_t>(in);
      }
      s.action = detail::read_le<std::int32_t>(in);
    }
    if (!in) throw Error("config", "load_dataset: truncated file " + path);
  }
  return episodes;
}

// n successful expert episodes, deterministic in (n, seed); episode seeds
// are drawn from the generator seed, skipping failures.
inline std::vector<EpisodeRecord> generate_episodes(std::size_t n,
                                                    std::uint64_t seed) {
  std::vector<EpisodeRecord> out;
  Rng rng(seed);
  while (out.size() < n) {
    EpisodeRecord ep = run_expert_episode(rng.next_u64());
    if (ep.success) out.push_back(std::move(ep));
  }
  return out;
}

inline void generate_dataset(std::size_t n, std::uint64_t seed,
                             const std::string& path) {
  save_dataset(generate_episodes(n, seed), path);
}

}  // namespace gats
