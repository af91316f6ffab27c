#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lldm/lifelong.hpp"
#include "oracles.hpp"

using namespace lldm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::size_t kObs = 6;

NetConfig tiny_net() {
  NetConfig c;
  c.obs_dim = kObs;
  c.window = 2;
  c.hidden = 12;
  c.hidden_layers = 2;
  c.mixtures = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 10;
  t.checkpoint_every = 5;
  t.batch_size = 8;
  t.replay_batch = 8;
  t.finetune_epochs = 3;
  t.adam.lr_max = 1e-3;
  t.adam.lr_min = 1e-4;
  return t;
}

// Synthetic demos whose action is a fixed linear map of the observation.
DemoSet synthetic_demos(std::size_t task, std::size_t n, std::uint64_t seed, std::size_t len = 12) {
  Rng rng(seed);
  DemoSet d;
  d.task_id = task;
  d.obs_dim = kObs;
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory t;
    t.task_id = task;
    t.success = true;
    for (std::size_t s = 0; s <= len; ++s) {
      std::vector<double> o(kObs);
      for (auto& x : o) x = rng.uniform(-1, 1);
      if (s < len) {
        const double sign = task % 2 ? -1.0 : 1.0;
        t.actions.push_back({sign * 0.5 * o[0], 0.5 * o[1], 0.3 * sign});
      }
      t.observations.push_back(std::move(o));
    }
    d.trajectories.push_back(std::move(t));
  }
  return d;
}

Trajectory traj(std::size_t task, std::size_t len) {
  Trajectory t;
  t.task_id = task;
  t.observations.assign(len + 1, std::vector<double>(kObs, static_cast<double>(task)));
  t.actions.assign(len, Action{0.1, 0.2, static_cast<double>(len)});
  return t;
}

void expect_same_checkpoints(const TaskCheckpoints& a, const TaskCheckpoints& b) {
  ASSERT_EQ(a.epochs, b.epochs);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i], b.params[i]) << "checkpoint " << i;
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

}  // namespace

TEST(DatasetBuild, OneColumnPerActionWithPaddedWindows) {
  const DemoSet d = synthetic_demos(0, 3, 1, 5);
  const Dataset ds = Dataset::from_demos(d, 2);
  ASSERT_EQ(ds.size(), 15u);
  EXPECT_EQ(ds.windows.rows(), 12);
  // First step of a trajectory: previous frame is zeros.
  for (int r = 0; r < 6; ++r) EXPECT_EQ(ds.windows(r, 0), 0.0);
  for (int r = 0; r < 6; ++r) EXPECT_EQ(ds.windows(6 + r, 0), d.trajectories[0].observations[0][r]);
  for (int r = 0; r < 6; ++r) EXPECT_EQ(ds.windows(r, 1), d.trajectories[0].observations[0][r]);
  EXPECT_EQ(ds.actions(0, 1), d.trajectories[0].actions[1].dx);
}

TEST(Schedule, CheckpointsAtFixedEpochs) {
  const Network net(tiny_net());
  const Dataset ds = Dataset::from_demos(synthetic_demos(0, 4, 2), 2);
  VectorXd theta = net.init_params(1);
  const VectorXd start = theta;
  auto r = make_regime(RegimeKind::kSeqL, tiny_train());
  const auto ck = r->train_task(net, theta, ds, 0, 5);
  EXPECT_EQ(ck.epochs, (std::vector<std::size_t>{0, 5, 10}));
  EXPECT_EQ(ck.params.front(), start);
  EXPECT_EQ(ck.params.back(), theta);
  EXPECT_EQ(ck.epoch_loss.size(), 10u);
  EXPECT_LT(ck.epoch_loss.back(), ck.epoch_loss.front());
}

TEST(Schedule, SameSeedSameParameters) {
  const Network net(tiny_net());
  const Dataset ds = Dataset::from_demos(synthetic_demos(0, 4, 2), 2);
  VectorXd a = net.init_params(1), b = a;
  auto ra = make_regime(RegimeKind::kSeqL, tiny_train());
  auto rb = make_regime(RegimeKind::kSeqL, tiny_train());
  expect_same_checkpoints(ra->train_task(net, a, ds, 0, 9), rb->train_task(net, b, ds, 0, 9));
  VectorXd c = net.init_params(1);
  EXPECT_NE(make_regime(RegimeKind::kSeqL, tiny_train())->train_task(net, c, ds, 0, 10).params.back(), a);
}

TEST(Schedule, EmptyDemosAreAnError) {
  const Network net(tiny_net());
  DemoSet empty;
  empty.obs_dim = kObs;
  const Dataset ds = Dataset::from_demos(empty, 2);
  VectorXd theta = net.init_params(1);
  for (RegimeKind k : {RegimeKind::kSeqL, RegimeKind::kER, RegimeKind::kEWC, RegimeKind::kPackNet}) {
    try {
      make_regime(k, tiny_train())->train_task(net, theta, ds, 0, 1);
      ADD_FAILURE() << to_string(k);
    } catch (const LifelongError& e) {
      EXPECT_EQ(e.code(), LifelongError::Code::kEmptyDemos);
    }
  }
  EXPECT_THROW(train_mtl(net, theta, {}, tiny_train(), 1), LifelongError);
  EXPECT_THROW(train_mtl(net, theta, {ds}, tiny_train(), 1), LifelongError);
}

TEST(Degenerate, RegimesMatchSeqLOnFirstTask) {
  const Network net(tiny_net());
  const Dataset ds = Dataset::from_demos(synthetic_demos(0, 4, 3), 2);
  VectorXd base = net.init_params(2);
  const auto ref = make_regime(RegimeKind::kSeqL, tiny_train())->train_task(net, base, ds, 0, 7);
  for (RegimeKind k : {RegimeKind::kER, RegimeKind::kEWC, RegimeKind::kPackNet}) {
    VectorXd theta = net.init_params(2);
    SCOPED_TRACE(to_string(k));
    expect_same_checkpoints(make_regime(k, tiny_train())->train_task(net, theta, ds, 0, 7), ref);
  }
}

TEST(Degenerate, ZeroLambdaEwcMatchesSeqL) {
  const Network net(tiny_net());
  const DemoSet d0 = synthetic_demos(0, 4, 4), d1 = synthetic_demos(1, 4, 5);
  const Dataset ds0 = Dataset::from_demos(d0, 2), ds1 = Dataset::from_demos(d1, 2);
  TrainConfig cfg = tiny_train();
  cfg.ewc_lambda = 0.0;
  VectorXd a = net.init_params(3), b = a;
  auto seql = make_regime(RegimeKind::kSeqL, cfg);
  auto ewc = make_regime(RegimeKind::kEWC, cfg);
  seql->train_task(net, a, ds0, 0, 1);
  ewc->train_task(net, b, ds0, 0, 1);
  ewc->finish_task(net, b, ds0, d0, 0, 1);
  expect_same_checkpoints(seql->train_task(net, a, ds1, 1, 1), ewc->train_task(net, b, ds1, 1, 1));
}

TEST(Degenerate, ZeroReplayBatchErMatchesSeqL) {
  const Network net(tiny_net());
  const DemoSet d0 = synthetic_demos(0, 4, 4), d1 = synthetic_demos(1, 4, 5);
  const Dataset ds0 = Dataset::from_demos(d0, 2), ds1 = Dataset::from_demos(d1, 2);
  TrainConfig cfg = tiny_train();
  cfg.buffer_capacity = 0;
  VectorXd a = net.init_params(3), b = a;
  auto seql = make_regime(RegimeKind::kSeqL, cfg);
  auto er = make_regime(RegimeKind::kER, cfg);
  seql->train_task(net, a, ds0, 0, 1);
  er->train_task(net, b, ds0, 0, 1);
  er->finish_task(net, b, ds0, d0, 0, 1);
  expect_same_checkpoints(seql->train_task(net, a, ds1, 1, 1), er->train_task(net, b, ds1, 1, 1));
}

TEST(Replay, CapacityAndBalancedEviction) {
  ReplayBuffer buf(1000);
  Rng rng(1);
  for (std::size_t task = 0; task < 30; ++task) {
    for (int i = 0; i < 50; ++i) buf.insert(traj(task, 3), rng);
    ASSERT_LE(buf.size(), 1000u);
  }
  EXPECT_EQ(buf.size(), 1000u);
  std::size_t lo = 1000, hi = 0;
  for (std::size_t task = 0; task < 30; ++task) {
    lo = std::min(lo, buf.count_for(task));
    hi = std::max(hi, buf.count_for(task));
  }
  EXPECT_LE(hi - lo, 1u);
  EXPECT_GE(lo, 33u);
}

TEST(Replay, DrawsUniformOverTrajectories) {
  ReplayBuffer buf(100);
  Rng rng(2);
  // Lengths vary so step-uniform sampling would be visibly non-uniform.
  for (std::size_t i = 0; i < 10; ++i) buf.insert(traj(i, 1 + 5 * i), rng);
  std::vector<double> counts(10, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto [t, s] = buf.draw(rng);
    ASSERT_LT(s, buf.items()[t].actions.size());
    ++counts[t];
  }
  EXPECT_LT(oracle::chi_square_uniform(counts), oracle::chi_square_crit_1pct(9));
}

TEST(Replay, SampleIntoFillsWindows) {
  ReplayBuffer buf(10);
  Rng rng(3);
  buf.insert(traj(4, 3), rng);
  MatrixXd w(2 * kObs, 5), a(3, 5);
  std::vector<std::size_t> drawn;
  buf.sample_into(rng, 2, 3, w, a, 2, &drawn);
  EXPECT_EQ(drawn, (std::vector<std::size_t>{0, 0, 0}));
  for (int c = 2; c < 5; ++c) {
    EXPECT_EQ(w(kObs, c), 4.0);
    EXPECT_EQ(a(2, c), 3.0);
  }
}

TEST(Replay, EmptyTrajectoriesAndZeroCapacityIgnored) {
  Rng rng(4);
  ReplayBuffer buf(10);
  buf.insert(traj(0, 0), rng);
  EXPECT_TRUE(buf.empty());
  ReplayBuffer none(0);
  none.insert(traj(0, 3), rng);
  EXPECT_TRUE(none.empty());
}

TEST(Replay, SerializeRoundTrip) {
  ReplayBuffer buf(7);
  Rng rng(5);
  for (std::size_t i = 0; i < 9; ++i) buf.insert(traj(i % 3, 2 + i), rng);
  const ReplayBuffer back = ReplayBuffer::deserialize(buf.serialize());
  EXPECT_EQ(back.capacity(), 7u);
  ASSERT_EQ(back.size(), buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_TRUE(back.items()[i] == buf.items()[i]);
  EXPECT_EQ(back.serialize(), buf.serialize());
  EXPECT_THROW(ReplayBuffer::deserialize("garbage!"), LifelongError);
}

TEST(Ewc, OnlineFisherRecurrence) {
  EwcState s;
  s.gamma = 0.9;
  s.lambda = 2.0;
  const VectorXd f1 = (VectorXd(3) << 1, 2, 3).finished(), f2 = (VectorXd(3) << 4, 0, 1).finished();
  const VectorXd t1 = (VectorXd(3) << 0.1, 0.2, 0.3).finished(), t2 = (VectorXd(3) << -1, 0, 1).finished();
  EXPECT_EQ(s.penalty(t1), 0.0);
  s.consolidate(t1, f1);
  s.consolidate(t2, f2);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.fisher[i], 0.9 * 0.1 * f1[i] + 0.1 * f2[i], 1e-15);
  EXPECT_EQ(s.anchor, t2);
  const VectorXd th = (VectorXd(3) << 0, 1, 2).finished();
  double pen = 0;
  for (int i = 0; i < 3; ++i) pen += 0.5 * 2.0 * s.fisher[i] * (th[i] - t2[i]) * (th[i] - t2[i]);
  EXPECT_NEAR(s.penalty(th), pen, 1e-14);
  VectorXd g = VectorXd::Zero(3);
  s.add_penalty_grad(th, g);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(g[i], 2.0 * s.fisher[i] * (th[i] - t2[i]), 1e-14);
}

TEST(Ewc, StateRoundTrip) {
  const Network net(tiny_net());
  const DemoSet d = synthetic_demos(0, 2, 6);
  const Dataset ds = Dataset::from_demos(d, 2);
  EwcRegime a(tiny_train());
  VectorXd theta = net.init_params(1);
  a.finish_task(net, theta, ds, d, 0, 1);
  EwcRegime b(tiny_train());
  b.load_state(a.save_state());
  EXPECT_EQ(b.state().anchor, a.state().anchor);
  EXPECT_EQ(b.state().fisher, a.state().fisher);
  EXPECT_THROW(b.load_state("LLDMPACKxxxxxxxx"), LifelongError);
}

TEST(PackNet, MasksAreDisjointAndTopMagnitude) {
  const Network net(tiny_net());
  PackNetState st;
  st.init(net);
  Rng rng(7);
  VectorXd theta = net.init_params(5);
  const std::size_t prunable = st.prunable();
  std::size_t owned = 0;
  for (int pos = 0; pos < 3; ++pos) {
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (st.owner[i] == PackNetState::kFree) theta[i] = rng.uniform(-1, 1);
    }
    const std::size_t free_before = st.free_count();
    std::vector<double> mags;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (st.owner[i] == PackNetState::kFree) mags.push_back(std::abs(theta[i]));
    }
    std::sort(mags.rbegin(), mags.rend());
    const std::size_t kept = st.prune(theta, pos, 0.25);
    EXPECT_EQ(kept, static_cast<std::size_t>(std::llround(0.25 * free_before)));
    owned += kept;
    const auto mask = st.mask_of(pos);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (mask[i]) EXPECT_GE(std::abs(theta[i]), mags[kept - 1]);
      if (st.owner[i] == PackNetState::kFree) EXPECT_EQ(theta[i], 0.0);
    }
  }
  EXPECT_EQ(owned + st.free_count(), prunable);
  for (std::size_t i = 0; i < st.owner.size(); ++i) {
    const int o = st.owner[i];
    EXPECT_TRUE(o == PackNetState::kFree || o == PackNetState::kBias || (o >= 0 && o < 3));
  }
}

TEST(PackNet, TrainableSetsAndInferenceView) {
  const Network net(tiny_net());
  PackNetState st;
  st.init(net);
  VectorXd theta = net.init_params(6);
  theta.array() += 0.5;
  st.prune(theta, 0, 0.5);
  const auto bias = net.bias_mask();
  const auto p1 = st.trainable(1, false), f1 = st.trainable(1, true), p0 = st.trainable(0, false);
  for (std::size_t i = 0; i < st.owner.size(); ++i) {
    EXPECT_EQ(p1[i], st.owner[i] == PackNetState::kFree ? 1 : 0);
    EXPECT_EQ(f1[i], st.owner[i] == 1 ? 1 : 0);
    if (bias[i]) EXPECT_EQ(p0[i], 1);
  }
  VectorXd later = theta;
  for (Eigen::Index i = 0; i < later.size(); ++i) {
    if (st.owner[i] == PackNetState::kFree) later[i] = 9.0;
  }
  EXPECT_EQ(st.inference_params(later, 0), theta);
}

TEST(PackNet, EarlierTaskViewIsFrozen) {
  const Network net(tiny_net());
  const DemoSet d0 = synthetic_demos(0, 4, 8), d1 = synthetic_demos(1, 4, 9);
  const Dataset ds0 = Dataset::from_demos(d0, 2), ds1 = Dataset::from_demos(d1, 2);
  PackNetRegime r(tiny_train());
  VectorXd theta = net.init_params(4);
  r.train_task(net, theta, ds0, 0, 3);
  r.finish_task(net, theta, ds0, d0, 0, 3);
  const VectorXd view0 = r.inference_params(theta, 0);
  r.train_task(net, theta, ds1, 1, 3);
  r.finish_task(net, theta, ds1, d1, 1, 3);
  EXPECT_EQ(r.inference_params(theta, 0), view0);
  EXPECT_NE(r.inference_params(theta, 1), view0);

  PackNetRegime back(tiny_train());
  back.load_state(r.save_state());
  EXPECT_EQ(back.state().owner, r.state().owner);
}

TEST(PackNet, CapacityExhausted) {
  const Network net(tiny_net());
  const DemoSet d = synthetic_demos(0, 2, 10);
  const Dataset ds = Dataset::from_demos(d, 2);
  TrainConfig cfg = tiny_train();
  cfg.keep_ratio = 1.0;
  cfg.epochs = 5;
  PackNetRegime r(cfg);
  VectorXd theta = net.init_params(1);
  r.train_task(net, theta, ds, 0, 1);
  r.finish_task(net, theta, ds, d, 0, 1);
  try {
    r.train_task(net, theta, ds, 1, 1);
    FAIL();
  } catch (const LifelongError& e) {
    EXPECT_EQ(e.code(), LifelongError::Code::kCapacityExhausted);
  }
}

TEST(Mtl, TaskPicksAreUniform) {
  const Network net(tiny_net());
  std::vector<Dataset> data;
  for (std::size_t j = 0; j < 3; ++j) data.push_back(Dataset::from_demos(synthetic_demos(j, 6, 20 + j), 2));
  TrainConfig cfg = tiny_train();
  cfg.epochs = 50;
  VectorXd theta = net.init_params(1);
  std::vector<std::size_t> picks;
  const auto ck = train_mtl(net, theta, data, cfg, 4, &picks);
  std::vector<double> counts(3, 0);
  for (std::size_t p : picks) ++counts[p];
  EXPECT_GT(picks.size(), 1000u);
  EXPECT_LT(oracle::chi_square_uniform(counts), oracle::chi_square_crit_1pct(2));
  EXPECT_EQ(ck.epochs.size(), 11u);
  EXPECT_LT(ck.epoch_loss.back(), ck.epoch_loss.front());
}

TEST(Mtl, NotASequentialRegime) {
  EXPECT_THROW(make_regime(RegimeKind::kMTL, tiny_train()), LifelongError);
  EXPECT_EQ(regime_from_string("packnet"), RegimeKind::kPackNet);
  EXPECT_THROW(regime_from_string("adam"), LifelongError);
}
