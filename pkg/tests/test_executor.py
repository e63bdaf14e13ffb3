"""Executor tests: workspace, diffs, builtin effects, subprocess jail."""

from __future__ import annotations

import copy
import random

import pytest

from helmsman.errors import UnknownSnapshot
from helmsman.executor import (
    BUILTIN_EFFECTS,
    ExecutionLog,
    Item,
    ItemKind,
    Workspace,
    WorkspaceManager,
    apply_diff,
    diff_items,
    elicit,
    execute,
    parse_workspace,
    serialize_workspace,
    substitute_command,
)
from helmsman.plugin_registry import (
    BindingKind,
    ExecutorBinding,
    InputExample,
    ParamKind,
    ParameterSpec,
    PluginManifest,
    PluginOrigin,
    Registry,
    load_plugins_dir,
)
from helmsman.config import PACKAGED_DATA


def board() -> Workspace:
    return Workspace(
        items={
            "track-1": Item(ItemKind.TRACK, {"corner_style": "sharp", "net": "vbus"}),
            "track-2": Item(ItemKind.TRACK, {"corner_style": "sharp", "net": "d1"}),
            "pad-1": Item(ItemKind.PAD, {"net": "vbus"}),
            "fp-1": Item(ItemKind.FOOTPRINT, {"reference": "U1"}),
        }
    )


@pytest.fixture()
def registry() -> Registry:
    return load_plugins_dir(PACKAGED_DATA / "plugins")


def subprocess_manifest(pid: str, command: str, idempotent=True, params=()) -> PluginManifest:
    return PluginManifest(
        plugin_id=pid,
        display_name=pid,
        description=f"test subprocess plugin {pid}",
        parameters=tuple(params),
        input_examples=(),
        binding=ExecutorBinding(BindingKind.SUBPROCESS, command=command),
        idempotent=idempotent,
        origin=PluginOrigin.USER_DEFINED,
    )


class TestWorkspaceSerialization:
    def test_round_trip(self):
        ws = board()
        ws.version = 7
        again = parse_workspace(serialize_workspace(ws))
        assert serialize_workspace(again) == serialize_workspace(ws)
        assert again.version == 7

    def test_deterministic_ordering(self):
        a = Workspace(items={"b": Item(ItemKind.PAD, {"z": "1", "a": "2"})})
        b = Workspace(items={"b": Item(ItemKind.PAD, {"a": "2", "z": "1"})})
        assert serialize_workspace(a) == serialize_workspace(b)

    def test_parse_rejects_bad_kind(self):
        text = "[workspace]\nversion = 0\ndirty = false\n\n[item x]\nkind = alien\n"
        from helmsman.errors import ParseError

        with pytest.raises(ParseError):
            parse_workspace(text)

    def test_parse_rejects_duplicate_item(self):
        text = (
            "[workspace]\nversion = 0\ndirty = false\n\n"
            "[item x]\nkind = pad\n\n[item x]\nkind = pad\n"
        )
        from helmsman.errors import ParseError

        with pytest.raises(ParseError):
            parse_workspace(text)


class TestSnapshots:
    def test_snapshot_mutate_rollback(self):
        ws = board()
        token = ws.snapshot()
        before = serialize_workspace(ws)
        ws.items["track-1"].properties["corner_style"] = "rounded"
        ws.version += 1
        ws.rollback(token)
        assert serialize_workspace(ws) == before

    def test_bogus_token(self):
        ws = board()
        with pytest.raises(UnknownSnapshot):
            ws.rollback("snap-bogus")

    def test_linear_history_invalidates_later_snapshots(self):
        ws = board()
        first = ws.snapshot()
        ws.items["pad-1"].properties["net"] = "gnd"
        second = ws.snapshot()
        ws.rollback(first)
        with pytest.raises(UnknownSnapshot):
            ws.rollback(second)
        ws.rollback(first)  # the target itself stays valid


class TestDiff:
    def test_diff_and_replay(self):
        before = board().items
        after = {k: copy.deepcopy(v) for k, v in before.items()}
        after["track-1"].properties["corner_style"] = "rounded"
        del after["pad-1"]
        after["text-1"] = Item(ItemKind.TEXT, {"content": "hello"})
        diff = diff_items(before, after)
        changes = {(e.item_id, e.change) for e in diff}
        assert changes == {
            ("track-1", "changed"),
            ("pad-1", "removed"),
            ("text-1", "added"),
        }
        replayed = apply_diff(before, diff)
        assert {k: v.to_dict() for k, v in replayed.items()} == {
            k: v.to_dict() for k, v in after.items()
        }

    def test_replay_fuzzed_builtin_runs(self, registry):
        rng = random.Random(99)
        for _ in range(30):
            ws = Workspace(
                items={
                    f"item-{i}": Item(
                        rng.choice(list(ItemKind)),
                        {"corner_style": rng.choice(["sharp", "rounded"])},
                    )
                    for i in range(rng.randint(0, 6))
                }
            )
            pre_items = {k: copy.deepcopy(v) for k, v in ws.items.items()}
            plugin_id = rng.choice(["round-tracker", "teardrop", "add-label"])
            args = {"text": "note"} if plugin_id == "add-label" else {}
            record = execute(plugin_id, args, registry, ws)
            assert record.outcome == "ok"
            replayed = apply_diff(pre_items, list(record.diff))
            assert {k: v.to_dict() for k, v in replayed.items()} == {
                k: v.to_dict() for k, v in ws.items.items()
            }


class TestElicit:
    def test_prompt_per_parameter_in_order(self, registry):
        form = elicit(registry.get("add-label"))
        assert [p.name for p in form.prompts] == ["text", "x-mil", "y-mil"]
        assert form.prompts[0].required is True
        assert form.prompts[1].default == "0"

    def test_examples_verbatim(self, registry):
        manifest = registry.get("round-tracker")
        form = elicit(manifest)
        assert form.examples == manifest.input_examples

    def test_zero_parameter_plugin(self):
        manifest = PluginManifest(
            plugin_id="noop",
            display_name="Noop",
            description="does nothing",
            parameters=(),
            input_examples=(),
            binding=ExecutorBinding(BindingKind.BUILTIN_SIM),
            origin=PluginOrigin.USER_DEFINED,
        )
        form = elicit(manifest)
        assert form.prompts == ()


class TestBuiltinExecution:
    def test_round_tracker_changes_two_sharp_tracks(self, registry):
        ws = board()
        record = execute("round-tracker", {"radius-mil": "25"}, registry, ws)
        assert record.outcome == "ok"
        assert len(record.diff) == 2
        assert ws.version == 1
        assert ws.items["track-1"].properties["corner_style"] == "rounded"
        assert ws.items["track-1"].properties["corner_radius_mil"] == "25"

    def test_rejected_leaves_workspace_untouched(self, registry):
        ws = board()
        before = serialize_workspace(ws)
        record = execute("round-tracker", {"radius-mil": "abc"}, registry, ws)
        assert record.outcome == "rejected"
        assert record.error["code"] == "validation_failed"
        assert serialize_workspace(ws) == before

    def test_idempotent_second_run_empty_diff(self, registry):
        ws = board()
        execute("round-tracker", {"radius-mil": 10}, registry, ws)
        first = serialize_workspace(ws)
        record = execute("round-tracker", {"radius-mil": 10}, registry, ws)
        assert record.outcome == "ok"
        assert record.diff == ()
        assert ws.version == 1
        assert serialize_workspace(ws) == first

    def test_non_idempotent_adds_each_run(self, registry):
        ws = board()
        execute("add-label", {"text": "rev-a"}, registry, ws)
        execute("add-label", {"text": "rev-a"}, registry, ws)
        assert ws.version == 2
        assert "label-1" in ws.items and "label-2" in ws.items

    def test_bom_export_reports_without_mutating(self, registry):
        ws = board()
        record = execute("bom-export", {}, registry, ws)
        assert record.outcome == "ok"
        assert record.diff == ()
        assert ws.version == 0
        assert "1 components as csv" in record.stdout_excerpt

    def test_effect_crash_is_failed_and_atomic(self, registry):
        def explosive(items, args):
            raise RuntimeError("boom")

        ws = board()
        before = serialize_workspace(ws)
        record = execute(
            "round-tracker",
            {},
            registry,
            ws,
            effects={"round-tracker": explosive},
        )
        assert record.outcome == "failed"
        assert record.error["code"] == "effect_failed"
        assert serialize_workspace(ws) == before

    def test_missing_effect_is_failed(self, registry):
        ws = board()
        record = execute("round-tracker", {}, registry, ws, effects={})
        assert record.outcome == "failed"
        assert record.error["code"] == "no_builtin_effect"

    def test_log_appends_records(self, registry, tmp_path):
        log = ExecutionLog(tmp_path / "exec.jsonl")
        ws = board()
        execute("teardrop", {}, registry, ws, log=log)
        execute("teardrop", {"ratio": "bad"}, registry, ws, log=log)
        assert [r.outcome for r in log.records] == ["ok", "rejected"]
        lines = (tmp_path / "exec.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_version_monotonic_over_random_sequences(self, registry):
        rng = random.Random(7)
        ws = board()
        last = ws.version
        for _ in range(25):
            plugin_id = rng.choice(["round-tracker", "teardrop", "bom-export", "add-label"])
            args = {"text": "t"} if plugin_id == "add-label" else {}
            if rng.random() < 0.3:
                args = {"bogus-arg": "1"}  # force a rejection
            execute(plugin_id, args, registry, ws)
            assert ws.version >= last
            last = ws.version


class TestSubstituteCommand:
    def test_values_cannot_split_tokens(self):
        argv = substitute_command("tool --label {text}", {"text": "two words; rm -rf"})
        assert argv == ["tool", "--label", "two words; rm -rf"]

    def test_embedded_placeholder(self):
        argv = substitute_command("tool --width={width-mil}", {"width-mil": 12})
        assert argv == ["tool", "--width=12"]


class TestSubprocessExecution:
    def test_rewrite_applies_and_bumps_version(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "bevel",
                'python3 -c "import os; p = os.environ[\'WORKSPACE_FILE\']; '
                "t = open(p).read(); open(p, 'w').write(t.replace('sharp', 'beveled'))\"",
            )
        )
        ws = board()
        record = execute("bevel", {}, registry, ws)
        assert record.outcome == "ok"
        assert ws.version == 1
        assert ws.items["track-1"].properties["corner_style"] == "beveled"
        assert len(record.diff) == 2

    def test_nonzero_exit_rolls_back(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "crasher",
                'python3 -c "import os, sys; p = os.environ[\'WORKSPACE_FILE\']; '
                "open(p, 'w').write('corrupted'); sys.exit(3)\"",
            )
        )
        ws = board()
        before = serialize_workspace(ws)
        record = execute("crasher", {}, registry, ws)
        assert record.outcome == "failed"
        assert record.error["code"] == "subprocess_failed"
        assert record.error["details"]["exit_code"] == 3
        assert serialize_workspace(ws) == before

    def test_corrupt_workspace_rolls_back(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "corruptor",
                'python3 -c "import os; '
                "open(os.environ['WORKSPACE_FILE'], 'w').write('not a workspace')\"",
            )
        )
        ws = board()
        before = serialize_workspace(ws)
        record = execute("corruptor", {}, registry, ws)
        assert record.outcome == "failed"
        assert serialize_workspace(ws) == before

    def test_timeout_kills_and_fails(self):
        registry = Registry()
        registry.register(
            subprocess_manifest("sleeper", 'python3 -c "import time; time.sleep(30)"')
        )
        ws = board()
        before = serialize_workspace(ws)
        record = execute("sleeper", {}, registry, ws, timeout_s=0.5)
        assert record.outcome == "failed"
        assert record.error["code"] == "execution_timeout"
        assert serialize_workspace(ws) == before

    def test_jail_blocks_escape_write(self, tmp_path):
        target = tmp_path / "escaped.txt"
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "probe-write",
                f"python3 -c \"open('{target}', 'w').write('leaked')\"",
            )
        )
        record = execute("probe-write", {}, registry, board())
        assert record.outcome == "failed"
        assert not target.exists()

    def test_jail_blocks_relative_escape(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "probe-rel",
                "python3 -c \"open('../outside.txt', 'w').write('x')\"",
            )
        )
        record = execute("probe-rel", {}, registry, board())
        assert record.outcome == "failed"

    def test_jail_blocks_reading_host_files(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "probe-read", "python3 -c \"print(open('/etc/passwd').read())\""
            )
        )
        record = execute("probe-read", {}, registry, board())
        assert record.outcome == "failed"

    def test_writes_inside_jail_allowed(self):
        registry = Registry()
        registry.register(
            subprocess_manifest(
                "scratch",
                "python3 -c \"open('note.txt', 'w').write('fine'); print('wrote')\"",
            )
        )
        record = execute("scratch", {}, registry, board())
        assert record.outcome == "ok"
        assert "wrote" in record.stdout_excerpt


class TestWorkspaceManager:
    def test_persist_and_reload(self, tmp_path, registry):
        manager = WorkspaceManager(tmp_path)
        ws = manager.get("w1", template=board())
        execute("round-tracker", {}, registry, ws)
        manager.save(ws)
        fresh = WorkspaceManager(tmp_path).get("w1")
        assert serialize_workspace(fresh) == serialize_workspace(ws)

    def test_distinct_ids_isolated(self, tmp_path, registry):
        manager = WorkspaceManager(tmp_path)
        a = manager.get("a", template=board())
        b = manager.get("b", template=board())
        execute("round-tracker", {}, registry, a)
        assert a.version == 1 and b.version == 0
