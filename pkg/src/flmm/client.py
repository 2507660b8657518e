"""Client agent: poll -> train -> package -> submit state machine.

The agent only ever initiates requests; its transport may be a real socket
or an in-process shim, both speaking the same frames.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass

from flmm.config import PartyConfig, ScenarioConfig
from flmm.dataquality import SceneRecord
from flmm.errors import FlmmError, ProtocolError, TransportError
from flmm.model import ModelSnapshot, load_snapshot
from flmm.privacy import apply_pairwise_masks, gaussian_mechanism
from flmm.protocol import Message, encode_message, pack_blocks, read_frame
from flmm.rng import hash_text, mix_seed
from flmm.training import TrainConfig, local_train, make_update, trainable_records

PHASES = ("idle", "training", "submitting", "waiting")
_ALLOWED = {
    ("idle", "training"),
    ("training", "submitting"),
    ("submitting", "waiting"),
    ("submitting", "idle"),
    ("waiting", "idle"),
}

_DP_SALT = 0xD9
_MASK_SALT = 0x3A5C


class StateMachineViolation(FlmmError):
    pass


class InProcessTransport:
    """Routes frames straight into a ServerCore, still via encode/decode."""

    def __init__(self, core):
        self.core = core

    def send(self, msg: Message) -> Message:
        from flmm.protocol import decode_payload
        payload = encode_message(msg)[4:]
        return decode_payload(self.core.handle_bytes(payload))


class SocketTransport:
    """One connection per request with bounded exponential-backoff retry."""

    def __init__(self, host: str, port: int, base_delay: float = 0.1,
                 max_delay: float = 5.0, max_attempts: int = 10):
        self.host = host
        self.port = port
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.max_attempts = max_attempts

    def send(self, msg: Message) -> Message:
        delay = self.base_delay
        last = None
        for _ in range(self.max_attempts):
            try:
                with socket.create_connection((self.host, self.port), timeout=30) as s:
                    s.sendall(encode_message(msg))
                    f = s.makefile("rb")
                    return read_frame(f)
            except (OSError, ProtocolError) as e:
                last = e
                time.sleep(delay)
                delay = min(self.max_delay, delay * 2)
        raise TransportError(f"{self.host}:{self.port} unreachable: {last}")


class ClientAgent:
    def __init__(self, cfg: ScenarioConfig, party: PartyConfig,
                 records: list[SceneRecord], transport):
        self.cfg = cfg
        self.party = party
        self.records = records
        self.transport = transport
        self.phase = "idle"
        self.snapshot: ModelSnapshot | None = None
        self.last_round = -1

    def _transition(self, new: str) -> None:
        if (self.phase, new) not in _ALLOWED:
            raise StateMachineViolation(f"{self.phase} -> {new}")
        self.phase = new

    def _request(self, msg_type: str, headers: dict | None = None,
                 body: bytes = b"") -> Message:
        h = {"party": self.party.party_id, "token": self.cfg.token}
        h.update(headers or {})
        return self.transport.send(Message(msg_type, h, body))

    def register(self) -> Message:
        return self._request("REGISTER", {
            "modalities": ",".join(self.party.modalities),
            "samples": len(trainable_records(self.records)),
        })

    def step(self) -> str:
        """One poll cycle; returns the response type observed."""
        resp = self._request("POLL")
        if resp.msg_type == "NOTASK":
            if self.phase == "waiting" and int(resp.header("round")) != self.last_round:
                self._transition("idle")
            return "NOTASK"
        if resp.msg_type == "REJECT":
            return "REJECT"
        if resp.msg_type != "ASSIGN":
            raise ProtocolError(f"unexpected poll response {resp.msg_type}")
        if self.phase == "waiting":
            self._transition("idle")  # new round observed
        round_num = int(resp.header("round"))
        version = int(resp.header("version"))
        self._transition("training")
        try:
            update = self._train(round_num, version)
            self._transition("submitting")
            ack = self._submit(update)
        except FlmmError:
            self.phase = "idle"
            raise
        if ack.msg_type == "ACK":
            self.last_round = round_num
            self._transition("waiting")
            return "ACK"
        self._transition("idle")  # REJECT: refetch and retry on next poll
        return "REJECT"

    def _fetch(self, version: int) -> ModelSnapshot:
        resp = self._request("FETCH", {"version": version})
        if resp.msg_type != "MODEL":
            raise ProtocolError(f"fetch failed: {resp.headers.get('reason')}")
        return load_snapshot(resp.body)

    def _train(self, round_num: int, version: int):
        model = self._fetch(version)
        self.snapshot = model
        usable = trainable_records(self.records)
        train_cfg = TrainConfig(
            epochs=self.cfg.train.epochs, lr=self.cfg.train.lr,
            batch_size=self.cfg.train.batch_size,
            anchor_mu=self.party.anchor_mu,
            distill_lambda=self.party.distill_lambda)
        seed = mix_seed(self.cfg.seed, round_num, hash_text(self.party.party_id))
        trained = local_train(model, usable, train_cfg, seed,
                              modalities=set(self.party.modalities))
        update = make_update(model, trained, self.party.party_id,
                             len(usable), round_num)
        if self.cfg.privacy.dp_enabled:
            update = gaussian_mechanism(
                update, self.cfg.privacy,
                mix_seed(self.cfg.seed, _DP_SALT, round_num,
                         hash_text(self.party.party_id)))
        if self.cfg.privacy.masking_enabled:
            update = apply_pairwise_masks(
                update, list(self.cfg.party_ids()),
                mix_seed(self.cfg.seed, _MASK_SALT, round_num))
        return update

    def _submit(self, update) -> Message:
        names, body = pack_blocks(update.deltas)
        return self._request("SUBMIT", {
            "base_version": update.base_version,
            "sample_count": update.sample_count,
            "round": update.submitted_round,
            "blocks": names,
        }, body)


def run_client_loop(agent: ClientAgent, poll_interval: float = 0.05,
                    max_idle_polls: int = 2400) -> int:
    """Poll until the server reports the run finished; returns round count."""
    agent.register()
    idle = 0
    while idle < max_idle_polls:
        resp = agent._request("POLL")
        if resp.msg_type == "ASSIGN":
            idle = 0
            agent.step()
        elif resp.headers.get("finished") == "1":
            return int(resp.header("round"))
        else:
            idle += 1
            time.sleep(poll_interval)
    raise TransportError("server never finished the run")
