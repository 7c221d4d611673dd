"""Run orchestration tests: config parsing, metrics, best-of-k, the scripted
demonstrator, and small end-to-end runs checked for artifacts, determinism
and audit cleanliness. The reward-improvement claim itself lives in the
acceptance suite where the run is big enough to mean something.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from deskrl import envsim, reconciler
from deskrl.runner import (
    ConfigError,
    MetricsRow,
    ReportSection,
    RunConfig,
    TeacherConfig,
    behavior_clone,
    best_of_k,
    build_teacher_corpus,
    emit_report,
    read_metrics_csv,
    run_rl,
    teacher_episode,
    write_metrics_csv,
)
from deskrl.toylm import BOS, EOS, TOK_ERR, TOK_LOOKUP, TOK_SUBMIT, TOK_RESULT, VALUE_BASE, ce_loss_and_grad, init_params


def rng_for(stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([0xC0, stream], dtype=np.uint64)))


TINY = {
    "seed": 5,
    "run": {
        "num_prompts": 6,
        "group_size": 2,
        "steps": 2,
        "groups_per_step": 2,
        "depths": [1, 2],
        "max_tokens": 24,
        "bc_episodes": 24,
        "bc_epochs": 1,
        "value_space": 8,
        "best_of_k": 2,
    },
}


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.from_dict({})
        assert cfg.seed == 0
        assert cfg.run.group_size == 4
        assert cfg.reward.lam == 0.002
        assert cfg.klreg.beta == 0.1

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown key runn"):
            RunConfig.from_dict({"runn": {}})

    def test_unknown_section_key_has_dotted_path(self):
        with pytest.raises(ConfigError, match=r"unknown key reward\.bogus"):
            RunConfig.from_dict({"reward": {"bogus": 1}})

    def test_lambda_alias(self):
        cfg = RunConfig.from_dict({"reward": {"lambda": 0.5}})
        assert cfg.reward.lam == 0.5
        assert cfg.to_dict()["reward"]["lambda"] == 0.5
        assert "lam" not in cfg.to_dict()["reward"]

    def test_dict_round_trip(self):
        cfg = RunConfig.from_dict(TINY)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_seed_must_be_integer(self):
        with pytest.raises(ConfigError, match="seed"):
            RunConfig.from_dict({"seed": "7"})
        with pytest.raises(ConfigError, match="seed"):
            RunConfig.from_dict({"seed": True})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="reward must be an object"):
            RunConfig.from_dict({"reward": 5})

    @pytest.mark.parametrize(
        "overrides, match",
        [
            ({"model": {"vocab": 5}}, "vocab too small"),
            ({"model": {"top_k": 9}}, "top_k"),
            ({"reward": {"behaviors": ["nope"]}}, "unknown rubric"),
            ({"run": {"group_size": 1}}, "group_size"),
            ({"run": {"depths": []}}, "depths"),
            ({"run": {"depths": [0]}}, "depths"),
            ({"run": {"steps": -1}}, "steps"),
            ({"run": {"num_prompts": -1}}, "num_prompts"),
            ({"run": {"groups_per_step": 0}}, "groups_per_step"),
            ({"run": {"best_of_k": 0}}, "best_of_k"),
            ({"run": {"teacher_noise": 1.0}}, "teacher_noise"),
            ({"run": {"depths": [5], "value_space": 5}}, "value_space"),
            ({"fleet": {"nodes": []}}, "nodes"),
        ],
    )
    def test_impossible_values(self, overrides, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_dict(overrides)

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(TINY))
        assert RunConfig.from_json_file(path) == RunConfig.from_dict(TINY)
        path.write_text("{broken")
        with pytest.raises(ConfigError, match="not valid JSON"):
            RunConfig.from_json_file(path)


class TestMetricsCsv:
    ROWS = [
        MetricsRow(
            step=0,
            mean_reward=0.123456789012345,
            best_of_k=0.25,
            mean_tokens=33.5,
            clip_fraction=0.0,
            kl_estimate=-1e-9,
            staleness={0: 3, 2: 1},
            groups_trained=4,
        ),
        MetricsRow(
            step=1,
            mean_reward=-0.5,
            best_of_k=0.0,
            mean_tokens=12.0,
            clip_fraction=0.125,
            kl_estimate=0.0,
            staleness={},
            groups_trained=1,
        ),
    ]

    def test_round_trip_exact(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(self.ROWS, path)
        assert read_metrics_csv(path) == self.ROWS

    def test_staleness_rendering(self):
        assert self.ROWS[0].staleness_str() == "0:3;2:1"
        assert self.ROWS[1].staleness_str() == ""

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("step,foo\n1,2\n")
        with pytest.raises(ConfigError, match="unexpected metrics header"):
            read_metrics_csv(path)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(self.ROWS, path)
        with open(path, "a") as fh:
            fh.write("2,not_a_float,0,0,0,0,,1\n")
        with pytest.raises(ConfigError, match="malformed metrics row"):
            read_metrics_csv(path)


class TestBestOfK:
    def test_pinned_half_successes(self):
        # C(4,2)=6 pairs; only the pair of both zeros misses a 1
        assert best_of_k([0.0, 0.0, 1.0, 1.0], 2) == pytest.approx(5 / 6)

    def test_k_extremes(self):
        rewards = [0.2, 0.8, 0.5]
        assert best_of_k(rewards, 1) == pytest.approx(0.5)
        assert best_of_k(rewards, 3) == pytest.approx(0.8)

    def test_matches_subset_enumeration(self):
        rng = rng_for(3)
        for g, k in ((4, 2), (5, 3), (6, 4)):
            rewards = rng.normal(size=g)
            expected = float(
                np.mean([max(c) for c in itertools.combinations(rewards, k)])
            )
            assert best_of_k(rewards, k) == pytest.approx(expected, rel=1e-12)

    def test_rows_average(self):
        a, b = [0.0, 1.0], [1.0, 1.0]
        single = (best_of_k(a, 2) + best_of_k(b, 2)) / 2
        assert best_of_k([a, b], 2) == pytest.approx(single)

    def test_validation(self):
        with pytest.raises(ValueError, match="k must be"):
            best_of_k([1.0, 2.0], 3)
        with pytest.raises(ValueError, match="k must be"):
            best_of_k([1.0, 2.0], 0)
        with pytest.raises(ValueError, match="non-empty"):
            best_of_k(np.empty((2, 0)), 1)


class TestTeacher:
    def test_depth_one_noise_free_episode_pinned(self):
        task = envsim.make_keychain_task(1, rng_for(1), value_space=8)
        assert (task["start"], task["terminus"]) == (2, 7)
        segments = teacher_episode(
            task, rng_for(99), TeacherConfig(noise=0.0, value_space=8)
        )
        assert len(segments) == 1
        tokens, mask = segments[0]
        # BOS + start, a good lookup, the failing probe, echo + submit, EOS
        assert tokens == [1, 12, 4, 12, 7, 17, 4, 17, 8, 17, 5, 17, 7, 3]
        assert mask == [
            False, False, True, True, False, False, True, True,
            False, True, True, True, False, True,
        ]
        assert envsim.verify_task(task) == 1.0

    def test_tool_results_never_trainable(self):
        task = envsim.make_keychain_task(3, rng_for(2), value_space=10)
        segments = teacher_episode(
            task, rng_for(3), TeacherConfig(noise=0.3, value_space=10)
        )
        for tokens, mask in segments:
            assert len(tokens) == len(mask)
            for t, m in zip(tokens, mask):
                if t in (TOK_RESULT, TOK_ERR):
                    assert not m

    def test_teacher_solves_with_noise(self):
        for stream in range(4, 12):
            task = envsim.make_keychain_task(2, rng_for(stream), value_space=12)
            teacher_episode(task, rng_for(stream + 50), TeacherConfig(noise=0.4, value_space=12))
            assert envsim.verify_task(task) == 1.0

    def test_noise_tokens_stay_out_of_value_range(self):
        cfg = TeacherConfig(noise=0.9, value_space=6)
        task = envsim.make_keychain_task(1, rng_for(13), value_space=6)
        tokens, _ = teacher_episode(task, rng_for(14), cfg)[0]
        informative = {TOK_LOOKUP, TOK_SUBMIT, TOK_RESULT, TOK_ERR, BOS, EOS}
        chain_values = {task["start"], *task["chain"].values()}
        for t in tokens:
            if t in informative or t == 2:  # SEP is legal filler
                continue
            v = t - VALUE_BASE
            assert not (0 <= v < 6) or v in chain_values

    def test_segmentation_structure(self):
        task = envsim.make_keychain_task(3, rng_for(2), value_space=8)
        segments = teacher_episode(
            task,
            rng_for(15),
            TeacherConfig(noise=0.0, value_space=8, segment_budget=6, summary_len=2),
        )
        assert len(segments) >= 2
        for (prev_tokens, prev_mask), (tokens, mask) in zip(segments, segments[1:]):
            summary = prev_tokens[-2:]
            assert prev_mask[-2:] == [True, True]
            assert tokens[:2] == summary and mask[:2] == [False, False]
        assert segments[-1][0][-1] == EOS
        assert envsim.verify_task(task) == 1.0

    def test_corpus_respects_vocab(self):
        cfg = RunConfig.from_dict(TINY)
        corpus = build_teacher_corpus(cfg, rng_for(16))
        assert len(corpus) >= cfg.run.bc_episodes
        assert all(
            0 <= t < cfg.model.vocab for tokens, _ in corpus for t in tokens
        )

    def test_behavior_clone_reduces_loss(self):
        cfg = RunConfig.from_dict(TINY)
        corpus = build_teacher_corpus(cfg, rng_for(17))[:20]
        params = init_params(0)
        before, _ = ce_loss_and_grad(params, corpus)
        behavior_clone(params, corpus, rng_for(18), epochs=2, batch=8, lr=0.03)
        after, _ = ce_loss_and_grad(params, corpus)
        assert after < 0.7 * before


class TestRunRl:
    def test_artifacts_and_bookkeeping(self, tmp_path):
        out = tmp_path / "run"
        rows = run_rl(RunConfig.from_dict(TINY), out)
        assert [r.step for r in rows] == [0, 1]
        for name in (
            "metrics.csv",
            "groups.jsonl",
            "audit.jsonl",
            "run_config.json",
            "run_state.json",
        ):
            assert (out / name).exists()
        assert (out / "weights").is_dir()

        state = json.loads((out / "run_state.json").read_text())
        assert state["steps"] == 2
        assert state["final_version"] == 2  # one publish per training step
        assert state["prompts_trained"] == 4

        assert read_metrics_csv(out / "metrics.csv") == rows
        cfg_back = json.loads((out / "run_config.json").read_text())
        assert RunConfig.from_dict(cfg_back) == RunConfig.from_dict(TINY)

    def test_groups_checkpoint_restores(self, tmp_path):
        out = tmp_path / "run"
        cfg = RunConfig.from_dict(TINY)
        run_rl(cfg, out)
        result = reconciler.restore_groups(
            out / "groups.jsonl", current_version=2, policy=cfg.staleness.policy()
        )
        assert result.errors == ()
        assert result.discarded_stale == ()
        assert len(result.groups) == 4
        for group in result.groups:
            assert group.advantages is not None
            assert sum(group.advantages) == pytest.approx(0.0, abs=1e-9)

    def test_audit_is_single_epoch_clean(self, tmp_path):
        out = tmp_path / "run"
        run_rl(RunConfig.from_dict(TINY), out)
        entries = reconciler.audit_load(out / "audit.jsonl")
        assert reconciler.single_epoch_violations(entries) == []
        trained = [e for e in entries if e["state"] == reconciler.SlotState.TRAINED.value]
        assert len(trained) == 4

    def test_staleness_within_policy(self, tmp_path):
        out = tmp_path / "run"
        cfg = RunConfig.from_dict(TINY)
        rows = run_rl(cfg, out)
        for row in rows:
            assert all(
                lag <= cfg.staleness.max_version_lag + 1 for lag in row.staleness
            )

    def test_deterministic_per_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_rl(RunConfig.from_dict(TINY), a)
        run_rl(RunConfig.from_dict(TINY), b)
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "groups.jsonl").read_bytes() == (b / "groups.jsonl").read_bytes()

    def test_seed_changes_outcome(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_rl(RunConfig.from_dict(TINY), a)
        other = dict(TINY)
        other["seed"] = 6
        run_rl(RunConfig.from_dict(other), b)
        assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()

    def test_refuses_dirty_out_dir(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "metrics.csv").write_text("stale\n")
        with pytest.raises(ConfigError, match="already holds run artifacts"):
            run_rl(RunConfig.from_dict(TINY), out)

    def test_zero_step_run(self, tmp_path):
        out = tmp_path / "run"
        cfg_dict = json.loads(json.dumps(TINY))
        cfg_dict["run"]["steps"] = 0
        rows = run_rl(RunConfig.from_dict(cfg_dict), out)
        assert rows == []
        assert read_metrics_csv(out / "metrics.csv") == []
        state = json.loads((out / "run_state.json").read_text())
        assert state["steps"] == 0 and state["final_version"] == 0

    def test_no_prompts_run_stops(self, tmp_path):
        out = tmp_path / "run"
        cfg_dict = json.loads(json.dumps(TINY))
        cfg_dict["run"]["num_prompts"] = 0
        cfg_dict["run"]["steps"] = None
        rows = run_rl(RunConfig.from_dict(cfg_dict), out)
        assert rows == []


class TestEmitReport:
    def _row(self, step, mean, best):
        return MetricsRow(
            step=step,
            mean_reward=mean,
            best_of_k=best,
            mean_tokens=10.0,
            clip_fraction=0.0,
            kl_estimate=0.0,
            staleness={},
            groups_trained=1,
        )

    def test_improving_run_passes(self, tmp_path):
        rows = [self._row(0, 0.1, 0.2), self._row(1, 0.3, 0.5)]
        summary, code = emit_report(rows, ReportSection(), tmp_path)
        assert code == 0 and summary["ok"]
        assert summary["failures"] == []
        assert json.loads((tmp_path / "summary.json").read_text()) == summary

    def test_flat_run_fails_by_name(self, tmp_path):
        rows = [self._row(0, 0.3, 0.5), self._row(1, 0.3, 0.6)]
        summary, code = emit_report(rows, ReportSection(), tmp_path)
        assert code == 1
        assert summary["failures"] == ["mean_reward_not_improved"]

    def test_min_thresholds(self, tmp_path):
        rows = [self._row(0, 0.0, 0.0), self._row(1, 0.1, 0.2)]
        section = ReportSection(
            require_improvement=False,
            min_final_mean_reward=0.5,
            min_final_best_of_k=0.5,
        )
        summary, code = emit_report(rows, section, tmp_path)
        assert code == 1
        assert summary["failures"] == [
            "final_mean_reward_below_min",
            "final_best_of_k_below_min",
        ]

    def test_empty_rows(self, tmp_path):
        summary, code = emit_report([], ReportSection(), tmp_path)
        assert code == 1 and summary["failures"] == ["no_metrics"]

    def test_reads_csv_path(self, tmp_path):
        rows = [self._row(0, 0.1, 0.2), self._row(1, 0.3, 0.5)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        summary, code = emit_report(path, ReportSection(), tmp_path)
        assert code == 0
        assert summary["steps"] == 2
