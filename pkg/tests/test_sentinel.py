import json
import socket
import threading
from dataclasses import replace

import pytest

from conftest import UNIT_DATASET_SEED, UNIT_SYNTH
from raywatch import cli, pipelines
from raywatch.errors import BindError, InBandError, RewindLimitExceeded
from raywatch.imagery import read_manifest
from raywatch.seeding import derive_seed
from raywatch.sentinel import (
    DriveConfig,
    SentinelServer,
    Verdict,
    classify_path,
    client_classify,
    client_ping,
    client_shutdown,
    detector_from_bundle,
    exit_code_for,
    parse_endpoint,
    workflow_driver,
)


@pytest.fixture(scope="module")
def fixture_paths(unit_manifest):
    entries = read_manifest(unit_manifest)
    valid = next(p for p, lab in entries if lab == 1)
    anomalous = next(p for p, lab in entries if lab == -1)
    return valid, anomalous


@pytest.fixture(scope="module")
def server(unit_bundle_path):
    srv = SentinelServer(unit_bundle_path, "127.0.0.1:0")
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    thread.join(timeout=5)


class TestEndpointParsing:
    def test_tcp_form(self):
        assert parse_endpoint("127.0.0.1:8641") == ("tcp", ("127.0.0.1", 8641))

    def test_unix_form(self):
        assert parse_endpoint("/tmp/sentinel.sock") == ("unix", "/tmp/sentinel.sock")


class TestClassifyCli:
    def test_exit_codes_map_bijectively(self, unit_bundle_path, fixture_paths, capsys):
        valid, anomalous = fixture_paths
        assert cli.main(["classify", "--bundle", str(unit_bundle_path), str(valid)]) == 0
        assert cli.main(["classify", "--bundle", str(unit_bundle_path), str(anomalous)]) == 1
        assert cli.main(["classify", "--bundle", str(unit_bundle_path), "/nowhere.png"]) == 2
        out = capsys.readouterr()
        lines = [json.loads(line) for line in out.out.strip().splitlines()]
        assert [v["label"] for v in lines] == [1, -1]
        assert "error" in out.err

    def test_verdict_line_matches_library(self, unit_bundle_path, fixture_paths, capsys):
        valid, _ = fixture_paths
        assert cli.main(["classify", "--bundle", str(unit_bundle_path), str(valid)]) == 0
        printed = json.loads(capsys.readouterr().out.strip())
        bundle = pipelines.load_bundle(unit_bundle_path)
        direct = classify_path(bundle, valid)
        assert printed == json.loads(direct.to_json())

    def test_exit_code_mapping_function(self):
        assert exit_code_for(Verdict(label=1, score=0.1, model_id="x")) == 0
        assert exit_code_for(Verdict(label=-1, score=0.9, model_id="x")) == 1


class TestDaemon:
    def test_ping_reports_model_id(self, server, unit_bundle_path):
        bundle = pipelines.load_bundle(unit_bundle_path)
        assert client_ping(server.endpoint) == bundle.model_id

    def test_round_trip_matches_direct_classification(self, server, unit_bundle_path, fixture_paths):
        bundle = pipelines.load_bundle(unit_bundle_path)
        for path in fixture_paths:
            assert client_classify(server.endpoint, path) == classify_path(bundle, path)

    def test_missing_path_is_in_band_and_daemon_survives(self, server, fixture_paths):
        with pytest.raises(InBandError):
            client_classify(server.endpoint, "/no/such/frame.png")
        valid, _ = fixture_paths
        assert client_classify(server.endpoint, valid).label == 1

    def test_hundred_sequential_requests_stay_ordered(self, server, fixture_paths):
        valid, anomalous = fixture_paths
        expected = []
        with socket.create_connection(parse_endpoint(server.endpoint)[1], timeout=30) as sock:
            stream = sock.makefile("rwb")
            for i in range(100):
                path = valid if i % 2 == 0 else anomalous
                expected.append(1 if i % 2 == 0 else -1)
                stream.write((json.dumps({"op": "classify", "path": str(path)}) + "\n").encode())
                stream.flush()
                reply = json.loads(stream.readline())
                assert reply["label"] == expected[-1]

    def test_malformed_and_unknown_requests_answered_in_band(self, server):
        kind, addr = parse_endpoint(server.endpoint)
        with socket.create_connection(addr, timeout=30) as sock:
            stream = sock.makefile("rwb")
            stream.write(b"this is not json\n")
            stream.flush()
            assert "error" in json.loads(stream.readline())
            stream.write(b'{"op":"transmogrify"}\n')
            stream.flush()
            assert "error" in json.loads(stream.readline())

    def test_bind_conflict_raises(self, unit_bundle_path, server):
        with pytest.raises(BindError):
            SentinelServer(unit_bundle_path, server.endpoint)

    def test_shutdown_op_stops_server(self, unit_bundle_path):
        srv = SentinelServer(unit_bundle_path, "127.0.0.1:0")
        thread = threading.Thread(target=srv.serve_forever, daemon=True)
        thread.start()
        assert client_ping(srv.endpoint)
        client_shutdown(srv.endpoint)
        thread.join(timeout=5)
        assert not thread.is_alive()


def _stub_detector(labels, warm_up=False):
    """Cycle through fixed labels regardless of the frame content."""
    state = {"i": 0}

    def detector(path):
        label = labels[min(state["i"], len(labels) - 1)]
        state["i"] += 1
        return Verdict(label=label, score=0.5, model_id="stub", warm_up=warm_up)

    return detector


class TestWorkflowDriver:
    def test_clean_run_has_no_rewinds(self):
        config = DriveConfig(steps=12, checkpoint_every=5, seed=1, synth=UNIT_SYNTH)
        log = workflow_driver(config, _stub_detector([1]), "/tmp/drive-clean")
        assert len(log) == 12
        assert all(e.action == "continue" for e in log)

    def test_injection_triggers_single_rewind_to_checkpoint(self, unit_bundle, tmp_path):
        base = replace(UNIT_SYNTH, texture_seed=derive_seed(UNIT_DATASET_SEED, 0, 1))
        config = DriveConfig(
            steps=40, inject_at=30, checkpoint_every=10, seed=77, synth=base, evolve_texture=False,
        )
        log = workflow_driver(config, detector_from_bundle(unit_bundle), tmp_path)
        rewinds = [e for e in log if e.action == "rewind"]
        assert [(e.step, e.rewind_to) for e in rewinds] == [(30, 20)]
        assert log[-1].step == 40 and log[-1].action == "continue"
        flagged = [e for e in log if e.label == -1]
        assert len(flagged) == 1 and flagged[0].step == 30

    def test_never_advances_past_negative_without_rewind(self):
        config = DriveConfig(steps=6, checkpoint_every=2, seed=3, synth=UNIT_SYNTH)
        log = workflow_driver(config, _stub_detector([1, 1, -1, 1, 1, 1, 1, 1]), "/tmp/drive-neg")
        rewind = next(e for e in log if e.action == "rewind")
        assert rewind.step == 3 and rewind.rewind_to == 2
        replayed = [e.step for e in log[log.index(rewind) + 1 :]]
        assert replayed[0] == 3  # resumes at the failed step, not past it

    def test_always_negative_detector_aborts_after_limit(self):
        config = DriveConfig(steps=5, checkpoint_every=10, rewind_limit=3, seed=4, synth=UNIT_SYNTH)
        with pytest.raises(RewindLimitExceeded) as err:
            workflow_driver(config, _stub_detector([-1]), "/tmp/drive-abort")
        log = err.value.log
        assert [e.action for e in log] == ["rewind", "rewind", "abort"]
        assert all(e.step == 1 for e in log)

    def test_warmup_policy_ignore_negative(self):
        config = DriveConfig(
            steps=4, checkpoint_every=2, policy="ignore-negative", seed=5, synth=UNIT_SYNTH,
        )
        log = workflow_driver(config, _stub_detector([-1], warm_up=True), "/tmp/drive-warm")
        assert all(e.action == "continue" for e in log)
        assert all(e.label == -1 and e.warm_up for e in log)  # verdicts logged untouched

    def test_warmup_policy_trust_still_rewinds(self):
        config = DriveConfig(steps=4, checkpoint_every=2, policy="trust", seed=6, synth=UNIT_SYNTH)
        with pytest.raises(RewindLimitExceeded):
            workflow_driver(config, _stub_detector([-1], warm_up=True), "/tmp/drive-trust")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DriveConfig(steps=3, policy="maybe")
        with pytest.raises(ValueError):
            DriveConfig(steps=0)
