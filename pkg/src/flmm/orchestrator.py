"""Round-based coordination server.

Clients always initiate (register, poll, submit, fetch); the server opens no
connections. All round-state mutations are serialized under one lock; reads
of the current model touch only immutable snapshots. Every round is appended
to a CRC-chained log with per-version checkpoints, enough to recover after a
crash and to replay coalitions for contribution measurement.
"""

from __future__ import annotations

import os
import socketserver
import threading
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from flmm.aggregation import (
    ASYNC_MIX,
    SYNC_AVG,
    AggregationPlan,
    ClientUpdate,
    apply_block_mask,
    async_mix,
    fedavg_adapters,
    product_mean,
    refactor_matrix,
    snapshot_blocks,
)
from flmm.contribution import LoggedRound
from flmm.errors import (
    AuthError,
    ConflictError,
    DuplicateError,
    HistoryError,
    ProtocolError,
    StalenessError,
    ValidationError,
)
from flmm.model import ModelSnapshot, load_snapshot, save_snapshot
from flmm.protocol import Message, encode_message, decode_payload, pack_blocks, \
    unpack_blocks

PHASES = ("open", "collecting", "aggregating", "closed")


@dataclass
class PartyInfo:
    modalities: tuple
    sample_count: int
    token: str
    last_seen: float


@dataclass
class RoundState:
    round: int
    model_version: int
    phase: str
    expected: set
    received: dict  # party -> ClientUpdate
    opened_at: float
    absentees: tuple = ()


@dataclass(frozen=True)
class ServerConfig:
    token: str
    plan: AggregationPlan
    rounds: int
    deadline: float = 60.0
    history_window: int = 16
    expected_parties: tuple = ()
    masking_enabled: bool = False


class RoundLog:
    """Append-only CRC-chained round log plus checkpoint/update files."""

    def __init__(self, log_dir: str):
        self.dir = log_dir
        os.makedirs(os.path.join(log_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(log_dir, "updates"), exist_ok=True)
        self.path = os.path.join(log_dir, "rounds.log")
        self._last_crc = 0
        if os.path.exists(self.path):
            for fields in self.verify():
                self._last_crc = int(fields["crc"], 16)

    def append(self, fields: dict) -> None:
        body = " ".join(f"{k}={v}" for k, v in fields.items())
        body += f" prev_crc={self._last_crc:08x}"
        crc = zlib.crc32(body.encode())
        line = f"{body} crc={crc:08x}\n"
        with open(self.path, "a") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())
        self._last_crc = crc

    def verify(self) -> list:
        """Parse all records, checking per-line CRCs and the chain."""
        records = []
        prev = 0
        if not os.path.exists(self.path):
            return records
        with open(self.path) as f:
            for i, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                body, _, crc_field = line.rpartition(" crc=")
                if not body:
                    raise HistoryError(f"round log line {i}: no crc field")
                if f"{zlib.crc32(body.encode()):08x}" != crc_field:
                    raise HistoryError(f"round log line {i}: CRC mismatch")
                fields = dict(kv.split("=", 1) for kv in body.split(" "))
                if int(fields["prev_crc"], 16) != prev:
                    raise HistoryError(f"round log line {i}: broken chain")
                fields["crc"] = crc_field
                prev = int(crc_field, 16)
                records.append(fields)
        return records

    def save_checkpoint(self, snapshot: ModelSnapshot) -> None:
        data = save_snapshot(snapshot)
        with open(self._ckpt_path(snapshot.version), "wb") as f:
            f.write(data)

    def load_checkpoint(self, version: int) -> ModelSnapshot:
        path = self._ckpt_path(version)
        if not os.path.exists(path):
            raise HistoryError(f"no checkpoint for version {version}")
        with open(path, "rb") as f:
            return load_snapshot(f.read())

    def checkpoint_bytes(self, version: int) -> bytes:
        path = self._ckpt_path(version)
        if not os.path.exists(path):
            raise HistoryError(f"no checkpoint for version {version}")
        with open(path, "rb") as f:
            return f.read()

    def prune_checkpoints(self, keep_from: int) -> None:
        for name in os.listdir(os.path.join(self.dir, "checkpoints")):
            v = int(name[1:].split(".")[0])
            if v < keep_from:
                os.remove(os.path.join(self.dir, "checkpoints", name))

    def _ckpt_path(self, version: int) -> str:
        return os.path.join(self.dir, "checkpoints", f"v{version}.ckpt")

    def save_update(self, round_num: int, update: ClientUpdate) -> None:
        names, body = pack_blocks(update.deltas)
        msg = Message("SUBMIT", {
            "party": update.client_id, "token": "",
            "base_version": update.base_version,
            "sample_count": update.sample_count,
            "round": update.submitted_round, "blocks": names,
        }, body)
        path = os.path.join(self.dir, "updates", f"r{round_num}_{update.client_id}.upd")
        with open(path, "wb") as f:
            f.write(encode_message(msg))

    def load_update(self, round_num: int, party: str) -> ClientUpdate:
        path = os.path.join(self.dir, "updates", f"r{round_num}_{party}.upd")
        if not os.path.exists(path):
            raise HistoryError(f"no logged update for round {round_num} party {party!r}")
        with open(path, "rb") as f:
            data = f.read()
        msg = decode_payload(data[4:])
        return ClientUpdate(
            client_id=msg.header("party"),
            base_version=int(msg.header("base_version")),
            deltas=unpack_blocks(msg.header("blocks"), msg.body),
            sample_count=int(msg.header("sample_count")),
            submitted_round=int(msg.header("round")),
        )

    def logged_rounds(self, plan: AggregationPlan) -> list:
        """Successful rounds with their updates, for coalition replay."""
        out = []
        for fields in self.verify():
            if fields.get("status") != "ok":
                continue
            r = int(fields["round"])
            contributors = [kv.split(":")[0]
                            for kv in fields["contributors"].split(",") if kv]
            updates = tuple(self.load_update(r, p) for p in contributors)
            out.append(LoggedRound(round=r, plan=plan, updates=updates))
        return out


class ServerCore:
    """Protocol-level request handler; shared by socket and in-process use."""

    def __init__(self, cfg: ServerConfig, initial: ModelSnapshot, log_dir: str,
                 clock=time.monotonic):
        self.cfg = cfg
        self.clock = clock
        self.lock = threading.RLock()
        self.registry: dict = {}
        self.log = RoundLog(log_dir)
        self.snapshot = initial
        self.finished = False
        self.log.save_checkpoint(initial)
        self.state = self._open_round(0)

    # -- lifecycle ----------------------------------------------------------

    def _open_round(self, round_num: int) -> RoundState:
        expected = set(self.cfg.expected_parties) or set(self.registry)
        return RoundState(round=round_num, model_version=self.snapshot.version,
                          phase="open", expected=expected, received={},
                          opened_at=self.clock())

    @classmethod
    def recover(cls, cfg: ServerConfig, log_dir: str, clock=time.monotonic):
        """Rebuild server state from the round log after a crash."""
        log = RoundLog(log_dir)
        records = log.verify()
        version = 0
        next_round = 0
        for f in records:
            if f.get("status") == "ok":
                version = int(f["post_version"])
            next_round = int(f["round"]) + 1
        snapshot = log.load_checkpoint(version)
        core = cls.__new__(cls)
        core.cfg = cfg
        core.clock = clock
        core.lock = threading.RLock()
        core.registry = {}
        core.log = log
        core.snapshot = snapshot
        core.finished = next_round >= cfg.rounds
        core.state = core._open_round(next_round)
        return core

    # -- protocol dispatch --------------------------------------------------

    def handle_bytes(self, payload: bytes) -> bytes:
        """Full protocol path: parse request payload, return response frame
        minus the length prefix (callers add it when framing)."""
        try:
            msg = decode_payload(payload)
            resp = self.handle(msg)
        except ProtocolError as e:
            resp = self._reject(str(e))
        return encode_message(resp)[4:]

    def handle(self, msg: Message) -> Message:
        with self.lock:
            self._check_deadline()
            try:
                if msg.msg_type == "REGISTER":
                    return self._register(msg)
                if msg.msg_type == "POLL":
                    return self._poll(msg)
                if msg.msg_type == "SUBMIT":
                    return self._submit(msg)
                if msg.msg_type == "FETCH":
                    return self._fetch(msg)
                raise ProtocolError(f"unexpected message type {msg.msg_type}")
            except (AuthError, ConflictError, DuplicateError, StalenessError,
                    ValidationError, HistoryError, ProtocolError) as e:
                return self._reject(str(e), kind=type(e).__name__)

    def _respond(self, msg_type: str, headers: dict | None = None,
                 body: bytes = b"") -> Message:
        h = {"round": self.state.round, "version": self.snapshot.version}
        h.update(headers or {})
        return Message(msg_type, h, body)

    def _reject(self, reason: str, kind: str = "ProtocolError") -> Message:
        return self._respond("REJECT", {"reason": reason, "kind": kind})

    def _auth(self, msg: Message) -> str:
        party = msg.header("party")
        if msg.header("token") != self.cfg.token:
            raise AuthError(f"bad token for party {party!r}")
        return party

    def _register(self, msg: Message) -> Message:
        party = msg.header("party")
        token = msg.header("token")
        if token != self.cfg.token:
            raise AuthError(f"bad token for party {party!r}")
        existing = self.registry.get(party)
        if existing is not None and existing.token != token:
            raise ConflictError(f"party {party!r} already registered with another token")
        modalities = tuple(m for m in msg.headers.get("modalities", "").split(",") if m)
        self.registry[party] = PartyInfo(
            modalities=modalities,
            sample_count=int(msg.headers.get("samples", "1")),
            token=token, last_seen=self.clock())
        if not self.cfg.expected_parties:
            self.state.expected.add(party)
        return self._respond("ACK")

    def _poll(self, msg: Message) -> Message:
        party = self._auth(msg)
        if party not in self.registry:
            raise AuthError(f"party {party!r} is not registered")
        self.registry[party].last_seen = self.clock()
        st = self.state
        if (self.finished or st.phase not in ("open", "collecting")
                or party not in st.expected or party in st.received):
            return self._respond("NOTASK", {"finished": "1" if self.finished else "0"})
        deadline_left = max(0.0, self.cfg.deadline - (self.clock() - st.opened_at))
        return self._respond("ASSIGN", {"deadline": f"{deadline_left:.3f}"})

    def _submit(self, msg: Message) -> Message:
        party = self._auth(msg)
        if party not in self.registry:
            raise AuthError(f"party {party!r} is not registered")
        st = self.state
        if self.finished or st.phase not in ("open", "collecting"):
            raise StalenessError("no round accepting submissions")
        if party in st.received:
            raise DuplicateError(f"duplicate submission from {party!r}")
        base_version = int(msg.header("base_version"))
        try:
            deltas = unpack_blocks(msg.header("blocks"), msg.body)
        except ProtocolError as e:
            raise ValidationError(str(e)) from e
        for name, m in deltas.items():
            if not np.all(np.isfinite(m)):
                raise ValidationError(f"non-finite values in block {name!r}")
        update = ClientUpdate(
            client_id=party, base_version=base_version, deltas=deltas,
            sample_count=int(msg.header("sample_count")),
            submitted_round=st.round)
        if self.cfg.plan.strategy == SYNC_AVG and base_version != st.model_version:
            raise StalenessError(
                f"update base {base_version} != round version {st.model_version}; refetch")
        if self.cfg.plan.strategy == ASYNC_MIX:
            return self._submit_async(update)
        st.received[party] = update
        st.phase = "collecting"
        if set(st.received) >= st.expected:
            st.phase = "aggregating"
            self.close_round()
        return self._respond("ACK")

    def _submit_async(self, update: ClientUpdate) -> Message:
        """Async plan: mix each update into the model as it arrives."""
        st = self.state
        window_floor = self.snapshot.version - self.cfg.history_window
        if update.base_version < max(0, window_floor):
            raise StalenessError(f"base version {update.base_version} outside the "
                                 f"history window of {self.cfg.history_window}")
        at_base = snapshot_blocks(self.log.load_checkpoint(update.base_version))
        started = self.clock()
        blocks = async_mix(snapshot_blocks(self.snapshot), update,
                           self.snapshot.version, self.cfg.plan, at_base)
        pre = self.snapshot.version
        self.log.save_update(st.round, update)
        self.snapshot = apply_block_mask(
            {n: blocks[n] for n in self.cfg.plan.block_mask if n in blocks},
            self.snapshot)
        self.log.save_checkpoint(self.snapshot)
        self._append_round_record([update], pre, started, status="ok")
        self._advance_round()
        return self._respond("ACK")

    def _fetch(self, msg: Message) -> Message:
        party = self._auth(msg)
        version = int(msg.header("version"))
        if version < max(0, self.snapshot.version - self.cfg.history_window):
            raise HistoryError(f"version {version} evicted from history")
        data = self.log.checkpoint_bytes(version)
        return self._respond("MODEL", body=data)

    # -- aggregation --------------------------------------------------------

    def _check_deadline(self) -> None:
        st = self.state
        if (not self.finished and st.phase in ("open", "collecting") and st.received
                and self.cfg.plan.strategy != ASYNC_MIX
                and self.clock() - st.opened_at > self.cfg.deadline):
            st.absentees = tuple(sorted(st.expected - set(st.received)))
            st.phase = "aggregating"
            self.close_round()

    def close_round(self) -> None:
        """Aggregate the collected updates and install the new snapshot."""
        st = self.state
        assert st.phase == "aggregating"
        updates = sorted(st.received.values(), key=lambda u: u.client_id)
        started = self.clock()
        pre = self.snapshot.version
        for u in updates:
            self.log.save_update(st.round, u)
        try:
            base = snapshot_blocks(self.snapshot)
            if self.cfg.masking_enabled:
                # masked deltas only cancel in an unweighted sum
                unweighted = [replace(u, sample_count=1) for u in updates]
                delta = fedavg_adapters(unweighted, self.cfg.plan)
                result = {n: base[n] + d for n, d in delta.items()}
            elif self.cfg.plan.strategy == "product_refactor":
                result = self._refactor(updates, base)
            else:
                delta = fedavg_adapters(updates, self.cfg.plan)
                result = {n: base[n] + d for n, d in delta.items()}
            self.snapshot = apply_block_mask(result, self.snapshot)
            self.log.save_checkpoint(self.snapshot)
            self._append_round_record(updates, pre, started, status="ok")
        except Exception as e:  # failed rounds leave the model untouched
            self._append_round_record(updates, pre, started, status="failed",
                                      reason=type(e).__name__)
        st.phase = "closed"
        self._advance_round()

    def _refactor(self, updates, base):
        """New adapter factors approximating the old product plus the averaged
        product-space delta; the bridge (full-rank) still averages elementwise."""
        result = {}
        for tower, adapter in (("vision", self.snapshot.vision.adapter),
                               ("text", self.snapshot.text.adapter)):
            scale = adapter.alpha / adapter.rank
            m = scale * (base[f"{tower}.b"] @ base[f"{tower}.a"]) \
                + product_mean(updates, tower, scale)
            a, b = refactor_matrix(m, adapter.rank, scale)
            result[f"{tower}.a"] = a
            result[f"{tower}.b"] = b
        if "bridge" in self.cfg.plan.block_mask:
            bridged = [u for u in updates if "bridge" in u.deltas]
            if bridged:
                delta = fedavg_adapters(
                    bridged, replace(self.cfg.plan, strategy=SYNC_AVG,
                                     block_mask=frozenset({"bridge"})))["bridge"]
                result["bridge"] = base["bridge"] + delta
        return {n: m for n, m in result.items() if n in self.cfg.plan.block_mask}

    def _append_round_record(self, updates, pre_version: int, started: float,
                             status: str, reason: str = "") -> None:
        blocks_crc = ""
        if status == "ok":
            parts = []
            for name, m in sorted(snapshot_blocks(self.snapshot).items()):
                crc = zlib.crc32(np.ascontiguousarray(m, dtype="<f8").tobytes())
                parts.append(f"{name}:{crc:08x}")
            blocks_crc = ";".join(parts)
        fields = {
            "round": self.state.round,
            "strategy": self.cfg.plan.strategy,
            "contributors": ",".join(f"{u.client_id}:{u.sample_count}" for u in updates),
            "absent": ",".join(self.state.absentees),
            "blocks": blocks_crc,
            "pre_version": pre_version,
            "post_version": self.snapshot.version,
            "metric": "NA",
            "duration": f"{self.clock() - started:.6f}",
            "status": status,
        }
        if reason:
            fields["reason"] = reason
        self.log.append(fields)

    def _advance_round(self) -> None:
        next_round = self.state.round + 1
        self.log.prune_checkpoints(self.snapshot.version - self.cfg.history_window)
        if next_round >= self.cfg.rounds:
            self.finished = True
        self.state = self._open_round(next_round)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        import struct as _struct
        from flmm.protocol import read_frame
        while True:
            try:
                msg = read_frame(self.rfile)
            except ProtocolError:
                return  # connection closed or garbage: drop it
            resp = encode_message(self.server.core.handle(msg))
            self.wfile.write(resp)
            self.wfile.flush()


class FederationServer(socketserver.ThreadingTCPServer):
    """Socket front end over a ServerCore; clients connect per request."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str, port: int, core: ServerCore):
        super().__init__((host, port), _Handler)
        self.core = core

    def serve_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
