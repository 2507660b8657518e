import numpy as np
import pytest

from flmm.aggregation import AggregationPlan, snapshot_blocks
from flmm.errors import HistoryError
from flmm.model import load_snapshot
from flmm.orchestrator import RoundLog, ServerConfig, ServerCore
from flmm.protocol import Message, pack_blocks, unpack_blocks
from flmm.rng import SplitMix64

from support import small_snapshot

TOKEN = "secret"


class FakeClock:
    def __init__(self):
        self.t = 1000.0

    def __call__(self):
        return self.t


def make_core(tmp_path, parties=("pa", "pb"), rounds=3, strategy="sync_avg",
              masking=False, deadline=60.0, clock=None):
    plan = AggregationPlan(strategy=strategy)
    cfg = ServerConfig(token=TOKEN, plan=plan, rounds=rounds, deadline=deadline,
                       expected_parties=tuple(parties), masking_enabled=masking)
    return ServerCore(cfg, small_snapshot(1), str(tmp_path),
                      clock=clock or FakeClock())


def random_deltas(seed, model):
    rng = SplitMix64(seed)
    return {n: 0.01 * rng.normal_matrix(*m.shape)
            for n, m in snapshot_blocks(model).items()}


def register(core, party, token=TOKEN, samples=4):
    return core.handle(Message("REGISTER", {"party": party, "token": token,
                                            "samples": str(samples)}))


def submit(core, party, deltas, base_version, token=TOKEN, samples=4):
    names, body = pack_blocks(deltas)
    return core.handle(Message("SUBMIT", {
        "party": party, "token": token, "base_version": str(base_version),
        "sample_count": str(samples), "blocks": names}, body))


class TestRegistration:
    def test_register_ack(self, tmp_path):
        core = make_core(tmp_path)
        assert register(core, "pa").msg_type == "ACK"
        assert "pa" in core.registry

    def test_bad_token_rejected(self, tmp_path):
        core = make_core(tmp_path)
        resp = register(core, "pa", token="wrong")
        assert resp.msg_type == "REJECT" and resp.header("kind") == "AuthError"

    def test_unregistered_poll_rejected(self, tmp_path):
        core = make_core(tmp_path)
        resp = core.handle(Message("POLL", {"party": "ghost", "token": TOKEN}))
        assert resp.msg_type == "REJECT" and resp.header("kind") == "AuthError"


class TestSyncRound:
    def test_full_round_flow(self, tmp_path):
        core = make_core(tmp_path)
        for p in ("pa", "pb"):
            register(core, p)
        poll = core.handle(Message("POLL", {"party": "pa", "token": TOKEN}))
        assert poll.msg_type == "ASSIGN"
        v0 = core.snapshot.version
        assert submit(core, "pa", random_deltas(1, core.snapshot), v0).msg_type == "ACK"
        assert core.state.phase == "collecting"
        # pa already submitted: no task until the round turns
        assert core.handle(Message("POLL", {"party": "pa", "token": TOKEN})
                           ).msg_type == "NOTASK"
        assert submit(core, "pb", random_deltas(2, core.snapshot), v0).msg_type == "ACK"
        assert core.snapshot.version == v0 + 1
        assert core.state.round == 1

    def test_aggregation_is_base_plus_weighted_mean(self, tmp_path):
        core = make_core(tmp_path)
        register(core, "pa", samples=1)
        register(core, "pb", samples=3)
        base = snapshot_blocks(core.snapshot)
        d1 = random_deltas(3, core.snapshot)
        d2 = random_deltas(4, core.snapshot)
        submit(core, "pa", d1, 0, samples=1)
        submit(core, "pb", d2, 0, samples=3)
        after = snapshot_blocks(core.snapshot)
        for n in base:
            expected = base[n] + (1 * d1[n] + 3 * d2[n]) / 4
            np.testing.assert_allclose(after[n], expected, atol=1e-15)

    def test_duplicate_submission_rejected(self, tmp_path):
        core = make_core(tmp_path)
        for p in ("pa", "pb"):
            register(core, p)
        submit(core, "pa", random_deltas(5, core.snapshot), 0)
        resp = submit(core, "pa", random_deltas(6, core.snapshot), 0)
        assert resp.msg_type == "REJECT" and resp.header("kind") == "DuplicateError"

    def test_stale_base_version_rejected(self, tmp_path):
        core = make_core(tmp_path)
        for p in ("pa", "pb"):
            register(core, p)
        resp = submit(core, "pa", random_deltas(7, core.snapshot), 99)
        assert resp.msg_type == "REJECT" and resp.header("kind") == "StalenessError"

    def test_nan_update_rejected(self, tmp_path):
        core = make_core(tmp_path)
        for p in ("pa", "pb"):
            register(core, p)
        bad = random_deltas(8, core.snapshot)
        bad["bridge"][0, 0] = np.nan
        resp = submit(core, "pa", bad, 0)
        assert resp.msg_type == "REJECT" and resp.header("kind") == "ValidationError"
        assert "pa" not in core.state.received

    def test_finished_after_configured_rounds(self, tmp_path):
        core = make_core(tmp_path, rounds=2)
        for p in ("pa", "pb"):
            register(core, p)
        for r in range(2):
            v = core.snapshot.version
            for i, p in enumerate(("pa", "pb")):
                submit(core, p, random_deltas(10 + 2 * r + i, core.snapshot), v)
        assert core.finished
        resp = core.handle(Message("POLL", {"party": "pa", "token": TOKEN}))
        assert resp.msg_type == "NOTASK" and resp.header("finished") == "1"
        resp = submit(core, "pa", random_deltas(20, core.snapshot),
                      core.snapshot.version)
        assert resp.msg_type == "REJECT"


class TestDeadline:
    def test_deadline_closes_with_absentees(self, tmp_path):
        clock = FakeClock()
        core = make_core(tmp_path, deadline=30.0, clock=clock)
        for p in ("pa", "pb"):
            register(core, p)
        submit(core, "pa", random_deltas(30, core.snapshot), 0)
        assert core.state.round == 0
        clock.t += 31.0
        core.handle(Message("POLL", {"party": "pa", "token": TOKEN}))
        assert core.state.round == 1
        records = core.log.verify()
        assert records[-1]["absent"] == "pb"
        assert records[-1]["contributors"].startswith("pa:")

    def test_no_close_when_nothing_received(self, tmp_path):
        clock = FakeClock()
        core = make_core(tmp_path, deadline=30.0, clock=clock)
        register(core, "pa")
        clock.t += 31.0
        core.handle(Message("POLL", {"party": "pa", "token": TOKEN}))
        assert core.state.round == 0


class TestFetch:
    def test_fetch_returns_checkpoint(self, tmp_path):
        core = make_core(tmp_path)
        register(core, "pa")
        resp = core.handle(Message("FETCH", {"party": "pa", "token": TOKEN,
                                             "version": "0"}))
        assert resp.msg_type == "MODEL"
        model = load_snapshot(resp.body)
        a, b = snapshot_blocks(model), snapshot_blocks(core.snapshot)
        for n in a:
            np.testing.assert_array_equal(a[n], b[n])

    def test_fetch_missing_version(self, tmp_path):
        core = make_core(tmp_path)
        register(core, "pa")
        resp = core.handle(Message("FETCH", {"party": "pa", "token": TOKEN,
                                             "version": "7"}))
        assert resp.msg_type == "REJECT" and resp.header("kind") == "HistoryError"


class TestAsync:
    def test_each_submit_advances_version(self, tmp_path):
        core = make_core(tmp_path, strategy="async_mix", rounds=4)
        for p in ("pa", "pb"):
            register(core, p)
        v0 = core.snapshot.version
        submit(core, "pa", random_deltas(40, core.snapshot), v0)
        assert core.snapshot.version == v0 + 1
        # pb may submit against the old base: staleness-weighted, not rejected
        resp = submit(core, "pb", random_deltas(41, core.snapshot), v0)
        assert resp.msg_type == "ACK"
        assert core.snapshot.version == v0 + 2

    def test_tau_zero_beta_one_reproduces_client_state(self, tmp_path):
        plan = AggregationPlan(strategy="async_mix", mixing_rate=1.0,
                               staleness_exponent=0.5)
        cfg = ServerConfig(token=TOKEN, plan=plan, rounds=4,
                           expected_parties=("pa", "pb"))
        core = ServerCore(cfg, small_snapshot(1), str(tmp_path), clock=FakeClock())
        register(core, "pa")
        base = snapshot_blocks(core.snapshot)
        d = random_deltas(42, core.snapshot)
        submit(core, "pa", d, core.snapshot.version)
        after = snapshot_blocks(core.snapshot)
        for n in base:
            np.testing.assert_allclose(after[n], base[n] + d[n], atol=1e-15)


class TestMasking:
    def test_masked_round_recovers_unweighted_mean(self, tmp_path):
        from flmm.aggregation import ClientUpdate
        from flmm.privacy import pairwise_mask, quantize_deltas
        core = make_core(tmp_path, masking=True)
        for p in ("pa", "pb"):
            register(core, p)
        base = snapshot_blocks(core.snapshot)
        raw = {p: quantize_deltas(random_deltas(50 + i, core.snapshot))
               for i, p in enumerate(("pa", "pb"))}
        ups = [ClientUpdate(p, 0, raw[p], 1, 0) for p in ("pa", "pb")]
        masked = pairwise_mask(ups, round_seed=123)
        for m in masked:
            submit(core, m.client_id, m.deltas, 0)
        after = snapshot_blocks(core.snapshot)
        for n in base:
            expected = base[n] + (raw["pa"][n] + raw["pb"][n]) / 2.0
            np.testing.assert_allclose(after[n], expected, atol=1e-15)


class TestRoundLog:
    def run_rounds(self, tmp_path, n=2):
        core = make_core(tmp_path, rounds=n)
        for p in ("pa", "pb"):
            register(core, p)
        for r in range(n):
            v = core.snapshot.version
            for i, p in enumerate(("pa", "pb")):
                submit(core, p, random_deltas(60 + 2 * r + i, core.snapshot), v)
        return core

    def test_chain_verifies(self, tmp_path):
        core = self.run_rounds(tmp_path)
        records = core.log.verify()
        assert len(records) == 2
        assert [r["status"] for r in records] == ["ok", "ok"]

    def test_single_byte_flip_detected(self, tmp_path):
        core = self.run_rounds(tmp_path)
        path = core.log.path
        data = bytearray(open(path, "rb").read())
        data[len(data) // 2] ^= 0x01
        open(path, "wb").write(bytes(data))
        with pytest.raises(HistoryError):
            RoundLog(str(tmp_path))

    def test_update_files_roundtrip(self, tmp_path):
        core = self.run_rounds(tmp_path)
        u = core.log.load_update(0, "pa")
        assert u.client_id == "pa" and u.sample_count == 4
        assert set(u.deltas) == set(snapshot_blocks(core.snapshot))

    def test_logged_rounds_for_replay(self, tmp_path):
        core = self.run_rounds(tmp_path)
        rounds = core.log.logged_rounds(core.cfg.plan)
        assert [r.round for r in rounds] == [0, 1]
        assert all(len(r.updates) == 2 for r in rounds)


class TestRecovery:
    def test_recover_is_bit_exact(self, tmp_path):
        core = TestRoundLog().run_rounds(tmp_path, n=2)
        recovered = ServerCore.recover(core.cfg, str(tmp_path), clock=FakeClock())
        a, b = snapshot_blocks(core.snapshot), snapshot_blocks(recovered.snapshot)
        for n in a:
            np.testing.assert_array_equal(a[n], b[n])
        assert recovered.snapshot.version == core.snapshot.version
        assert recovered.state.round == core.state.round
        assert recovered.finished == core.finished

    def test_recover_midway_continues(self, tmp_path):
        core = make_core(tmp_path, rounds=3)
        for p in ("pa", "pb"):
            register(core, p)
        v = core.snapshot.version
        for i, p in enumerate(("pa", "pb")):
            submit(core, p, random_deltas(70 + i, core.snapshot), v)
        assert core.state.round == 1
        recovered = ServerCore.recover(core.cfg, str(tmp_path), clock=FakeClock())
        assert not recovered.finished
        assert recovered.state.round == 1
        # the recovered server finishes the remaining rounds normally
        for p in ("pa", "pb"):
            register(recovered, p)
        for r in range(1, 3):
            v = recovered.snapshot.version
            for i, p in enumerate(("pa", "pb")):
                submit(recovered, p, random_deltas(80 + 2 * r + i,
                                                   recovered.snapshot), v)
        assert recovered.finished

    def test_recover_from_empty_log(self, tmp_path):
        core = make_core(tmp_path, rounds=2)
        recovered = ServerCore.recover(core.cfg, str(tmp_path), clock=FakeClock())
        assert recovered.state.round == 0 and not recovered.finished
        a, b = snapshot_blocks(core.snapshot), snapshot_blocks(recovered.snapshot)
        for n in a:
            np.testing.assert_array_equal(a[n], b[n])


class TestHandleBytes:
    def test_byte_path_equals_object_path(self, tmp_path):
        from flmm.protocol import decode_payload, encode_message
        core = make_core(tmp_path)
        msg = Message("REGISTER", {"party": "pa", "token": TOKEN})
        resp_bytes = core.handle_bytes(encode_message(msg)[4:])
        resp = decode_payload(resp_bytes)
        assert resp.msg_type == "ACK"

    def test_garbage_bytes_rejected(self, tmp_path):
        from flmm.protocol import decode_payload
        core = make_core(tmp_path)
        resp = decode_payload(core.handle_bytes(b"not a frame"))
        assert resp.msg_type == "REJECT"
