"""Interactive session server: a human (or scripted client) drives the
simulator over a persistent bidirectional channel and records
demonstrations.

Wire format: length-prefixed UTF-8 JSON records (4-byte big-endian length,
then a payload with an explicit "type" field). The same records ride either
a raw TCP stream or, for browsers, inside WebSocket binary messages; the
server sniffs the transport from the first bytes of each connection.

The server owns the clock: a fixed-rate loop applies the most recently
received action (zero-order hold), steps the world, and emits a frame.
Recorded trajectories are ordinary ``.evtraj`` files marked source=human.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sim, wsutil
from .errors import DataError, ProtocolError
from .sim import ActionPair, SimConfig, WorldState
from .trajectories import save as save_trajectories, trajectory_from_arrays

PROTOCOL_VERSION = 1
NEUTRAL_ACTION = ActionPair(throttle=0.0, steering=0.5, fire_primary=0, fire_secondary=0)
CONTROL_COMMANDS = ("start", "pause", "reset", "record_on", "record_off", "save")


@dataclass(frozen=True)
class Hello:
    protocol_version: int
    sim: dict | None = None


@dataclass(frozen=True)
class Frame:
    tick: int
    world: dict
    telemetry: list
    events: dict
    recording: dict
    notice: dict | None = None


@dataclass(frozen=True)
class Action:
    tick: int
    continuous: tuple[float, float]
    discrete: tuple[int, int]


@dataclass(frozen=True)
class Control:
    command: str
    name: str | None = None


@dataclass(frozen=True)
class Bye:
    reason: str = ""


SessionMessage = Hello | Frame | Action | Control | Bye

_TYPE_BY_CLASS = {Hello: "hello", Frame: "frame", Action: "action",
                  Control: "control", Bye: "bye"}


def encode_message(message: SessionMessage) -> bytes:
    """Full wire record: big-endian u32 length prefix + UTF-8 JSON."""
    try:
        type_name = _TYPE_BY_CLASS[type(message)]
    except KeyError:
        raise ProtocolError(f"cannot encode {type(message).__name__}")
    payload = {"type": type_name}
    for key, value in vars(message).items():
        if value is None and key in ("sim", "name", "notice"):
            continue
        payload[key] = list(value) if isinstance(value, tuple) else value
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return struct.pack("!I", len(blob)) + blob


def decode_message(record: bytes) -> SessionMessage:
    if len(record) < 4:
        raise ProtocolError("framing error: record shorter than its length prefix")
    (length,) = struct.unpack_from("!I", record, 0)
    if len(record) - 4 != length:
        raise ProtocolError(
            f"framing error: declared {length} payload bytes, got {len(record) - 4}")
    try:
        payload = json.loads(record[4:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message payload: {exc}") from exc
    if not isinstance(payload, dict) or "type" not in payload:
        raise ProtocolError("message payload has no type field")
    type_name = payload.pop("type")
    try:
        if type_name == "hello":
            return Hello(protocol_version=int(payload["protocol_version"]),
                         sim=payload.get("sim"))
        if type_name == "frame":
            return Frame(tick=int(payload["tick"]), world=payload["world"],
                         telemetry=payload["telemetry"], events=payload["events"],
                         recording=payload["recording"], notice=payload.get("notice"))
        if type_name == "action":
            continuous = payload["continuous"]
            discrete = payload["discrete"]
            return Action(tick=int(payload["tick"]),
                          continuous=(float(continuous[0]), float(continuous[1])),
                          discrete=(int(discrete[0]), int(discrete[1])))
        if type_name == "control":
            command = payload["command"]
            if command not in CONTROL_COMMANDS:
                raise ProtocolError(f"unknown control command {command!r}")
            return Control(command=command, name=payload.get("name"))
        if type_name == "bye":
            return Bye(reason=payload.get("reason", ""))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed {type_name} message: {exc}") from exc
    raise ProtocolError(f"unknown message type {type_name!r}")


class RawChannel:
    """Length-prefixed records over a plain TCP stream."""

    def __init__(self, sock: socket.socket, preread: bytes = b""):
        self._sock = sock
        self._buffer = bytearray(preread)
        self._lock = threading.Lock()

    def _recv_into_buffer(self, needed: int) -> bool:
        while len(self._buffer) < needed:
            try:
                chunk = self._sock.recv(65536)
            except OSError:
                return False
            if not chunk:
                return False
            self._buffer += chunk
        return True

    def recv_record(self) -> bytes | None:
        if not self._recv_into_buffer(4):
            return None
        (length,) = struct.unpack_from("!I", self._buffer, 0)
        if not self._recv_into_buffer(4 + length):
            raise ProtocolError("framing error: connection closed mid-record")
        record = bytes(self._buffer[: 4 + length])
        del self._buffer[: 4 + length]
        return record

    def send_record(self, record: bytes) -> None:
        with self._lock:
            self._sock.sendall(record)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class WsChannel:
    """The same records carried one-per-WebSocket-binary-message."""

    def __init__(self, sock: socket.socket, preread: bytes):
        self._sock = sock
        self._lock = threading.Lock()
        request = wsutil.read_http_request(self._recv_exact, preread)
        key = wsutil.parse_handshake(request)
        sock.sendall(wsutil.handshake_response(key))

    def _recv_exact(self, n: int) -> bytes:
        data = bytearray()
        while len(data) < n:
            try:
                chunk = self._sock.recv(n - len(data))
            except OSError:
                break
            if not chunk:
                break
            data += chunk
        return bytes(data)

    def recv_record(self) -> bytes | None:
        return wsutil.read_message(self._recv_exact, self._send_raw)

    def _send_raw(self, data: bytes) -> None:
        with self._lock:
            self._sock.sendall(data)

    def send_record(self, record: bytes) -> None:
        self._send_raw(wsutil.encode_frame(record, wsutil.OP_BINARY))

    def close(self) -> None:
        try:
            self._send_raw(wsutil.encode_frame(b"", wsutil.OP_CLOSE))
        except OSError:
            pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def _quantize(value: float) -> float:
    # Recorded files hold float32; apply the same rounding to the actions we
    # feed the sim so offline replay reproduces observations bit-exactly.
    return float(np.float32(value))


class Session:
    """One client driving one simulator instance."""

    def __init__(self, channel, sim_config: SimConfig, record_dir: Path | None = None,
                 realtime: bool = True):
        self.channel = channel
        self.sim_config = sim_config
        self.record_dir = Path(record_dir) if record_dir is not None else None
        self.realtime = realtime
        self.state: WorldState = sim.reset(sim_config)
        self.running = False
        self.recording = False
        self.samples: list[tuple[np.ndarray, ActionPair]] = []
        self.latest_action = NEUTRAL_ACTION
        self.last_action_tick = -1
        self.saved_files = 0
        self._controls: queue.Queue[Control] = queue.Queue()
        self._dead = threading.Event()
        self._wake = threading.Event()
        self._lock = threading.Lock()
        self._last_events: dict = {"kill": False, "crashed": False,
                                   "episode_over": False, "reason": "none"}

    # -- receive side ---------------------------------------------------------

    def _receiver(self) -> None:
        while not self._dead.is_set():
            try:
                record = self.channel.recv_record()
            except ProtocolError as exc:
                self._say_goodbye(str(exc))
                break
            if record is None:
                self._dead.set()
                break
            try:
                message = decode_message(record)
            except ProtocolError as exc:
                self._say_goodbye(str(exc))
                break
            if isinstance(message, Bye):
                self._dead.set()
            elif isinstance(message, Control):
                self._controls.put(message)
            elif isinstance(message, Action):
                self._handle_action(message)
            else:
                self._say_goodbye(f"unexpected {type(message).__name__} after handshake")
                break
            self._wake.set()

    def _handle_action(self, message: Action) -> None:
        with self._lock:
            if message.tick < self.last_action_tick:
                self._send_frame(notice={
                    "kind": "warning",
                    "message": f"stale action for tick {message.tick} rejected "
                               f"(newest is {self.last_action_tick})"})
                return
            throttle, steering = message.continuous
            fire_primary, fire_secondary = message.discrete
            if not (0.0 <= throttle <= 1.0 and 0.0 <= steering <= 1.0
                    and fire_primary in (0, 1) and fire_secondary in (0, 1)):
                self._send_frame(notice={
                    "kind": "warning",
                    "message": f"action out of bounds rejected: "
                               f"({throttle}, {steering}, {fire_primary}, {fire_secondary})"})
                return
            self.last_action_tick = message.tick
            self.latest_action = ActionPair(
                throttle=_quantize(throttle), steering=_quantize(steering),
                fire_primary=fire_primary, fire_secondary=fire_secondary)

    def _say_goodbye(self, reason: str) -> None:
        if not self._dead.is_set():
            try:
                self.channel.send_record(encode_message(Bye(reason=reason)))
            except OSError:
                pass
        self._dead.set()
        self._wake.set()

    # -- frames ----------------------------------------------------------------

    def _frame(self, notice: dict | None = None) -> Frame:
        state = self.state
        world = {
            "arena_size": state.config.arena_size,
            "player": {
                "x": state.player.position[0], "y": state.player.position[1],
                "dx": state.player.heading[0], "dy": state.player.heading[1],
                "speed": state.player.speed, "alive": state.player.alive,
            },
            "enemies": [
                {"x": e.position[0], "y": e.position[1], "dx": e.heading[0],
                 "dy": e.heading[1], "hp": e.hp, "alive": e.alive}
                for e in state.enemies
            ],
            "obstacles": [[x, y, r] for x, y, r in state.obstacles],
            "projectiles": [
                {"x": p.position[0], "y": p.position[1]} for p in state.projectiles
            ],
        }
        telemetry = [state.player.position[0], state.player.position[1],
                     state.player.heading[0], state.player.heading[1],
                     state.player.speed, float(state.secondary_ammo)]
        return Frame(tick=state.tick, world=world, telemetry=telemetry,
                     events=dict(self._last_events),
                     recording={"on": self.recording, "samples": len(self.samples)},
                     notice=notice)

    def _send_frame(self, notice: dict | None = None) -> None:
        if self._dead.is_set():
            return
        try:
            self.channel.send_record(encode_message(self._frame(notice)))
        except OSError:
            self._dead.set()

    # -- controls ---------------------------------------------------------------

    def _apply_control(self, control: Control) -> None:
        if control.command == "start":
            if self._episode_over():
                self._reset_episode()
            self.running = True
        elif control.command == "pause":
            self.running = False
        elif control.command == "reset":
            self._reset_episode()
        elif control.command == "record_on":
            self.recording = True
            self.samples = []
        elif control.command == "record_off":
            self.recording = False
        elif control.command == "save":
            self._save(control.name or f"session-{self.saved_files}")
            return   # _save sends its own notice frame
        self._send_frame()

    def _reset_episode(self) -> None:
        self.state = sim.reset(self.sim_config)
        self.running = False
        self.recording = False
        self.samples = []
        self.latest_action = NEUTRAL_ACTION
        self._last_events = {"kill": False, "crashed": False,
                             "episode_over": False, "reason": "none"}

    def _episode_over(self) -> bool:
        return (not self.state.player.alive
                or self.state.tick >= self.sim_config.max_ticks)

    def _save(self, name: str) -> None:
        if self.record_dir is None:
            self._send_frame(notice={"kind": "warning",
                                     "message": "recording directory not configured"})
            return
        if not self.samples:
            self._send_frame(notice={"kind": "warning",
                                     "message": "nothing recorded yet"})
            return
        observations = np.stack([obs for obs, _ in self.samples])
        continuous = np.asarray([a.continuous for _, a in self.samples], dtype=np.float32)
        discrete = np.asarray([a.discrete for _, a in self.samples], dtype=np.float32)
        trajectory = trajectory_from_arrays(
            episode_id=self.saved_files, sim_config=self.sim_config,
            observations=observations, continuous=continuous, discrete=discrete,
            source="human", seed=self.sim_config.seed)
        self.record_dir.mkdir(parents=True, exist_ok=True)
        path = self.record_dir / f"{name}.evtraj"
        try:
            save_trajectories([trajectory], path)
        except DataError as exc:
            self._send_frame(notice={"kind": "warning", "message": str(exc)})
            return
        self.saved_files += 1
        self._send_frame(notice={"kind": "saved", "name": path.name,
                                 "samples": len(self.samples)})

    # -- main loop ---------------------------------------------------------------

    def run(self) -> None:
        try:
            self._run()
        finally:
            self.channel.close()

    def _run(self) -> None:
        record = self.channel.recv_record()
        if record is None:
            return
        try:
            hello = decode_message(record)
        except ProtocolError as exc:
            self._say_goodbye(str(exc))
            return
        if not isinstance(hello, Hello):
            self._say_goodbye("expected hello as the first message")
            return
        if hello.protocol_version != PROTOCOL_VERSION:
            self._say_goodbye(
                f"protocol version mismatch: got {hello.protocol_version}, "
                f"expected {PROTOCOL_VERSION}")
            return
        self.channel.send_record(encode_message(
            Hello(protocol_version=PROTOCOL_VERSION, sim=self.sim_config.as_dict())))

        receiver = threading.Thread(target=self._receiver, daemon=True)
        receiver.start()

        period = self.sim_config.dt
        next_tick = time.monotonic()
        while not self._dead.is_set():
            while True:
                try:
                    self._apply_control(self._controls.get_nowait())
                except queue.Empty:
                    break
            if self._dead.is_set():
                break
            if self.running and not self._episode_over():
                with self._lock:
                    action = self.latest_action
                observation = sim.observe(self.state)
                if self.recording:
                    self.samples.append((observation.flatten(), action))
                self.state, events = sim.step(self.state, action)
                self._last_events = {"kill": events.kill, "crashed": events.crashed,
                                     "episode_over": events.episode_over,
                                     "reason": events.reason}
                if events.episode_over:
                    self.running = False
                    self.recording = False
                self._send_frame()
                if self.realtime:
                    next_tick += period
                    delay = next_tick - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
            else:
                self._wake.clear()
                self._wake.wait(timeout=period if self.realtime else 0.005)
                next_tick = time.monotonic()


class Server:
    """Accepts connections and runs one session per client."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 sim_config: SimConfig | None = None,
                 record_dir: Path | None = None, realtime: bool = True):
        self.sim_config = sim_config if sim_config is not None else SimConfig()
        self.record_dir = record_dir
        self.realtime = realtime
        self._listener = socket.create_server((host, port))
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._closing = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> None:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            thread = threading.Thread(target=self._serve_one, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            # Sniff the transport: a websocket upgrade starts with "GET ",
            # the raw protocol with a binary length prefix. Peek until four
            # bytes arrived so a short first segment cannot misroute.
            while True:
                preread = conn.recv(4, socket.MSG_PEEK)
                if len(preread) >= 4 or not preread:
                    break
            if preread.startswith(b"GET "):
                channel = WsChannel(conn, preread=b"")
            else:
                channel = RawChannel(conn)
        except (OSError, ProtocolError):
            conn.close()
            return
        session = Session(channel, self.sim_config, record_dir=self.record_dir,
                          realtime=self.realtime)
        try:
            session.run()
        except (OSError, ProtocolError):
            pass

    def wait(self) -> None:
        while self._accept_thread is not None and self._accept_thread.is_alive():
            self._accept_thread.join(timeout=0.2)

    def stop(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for thread in self._threads:
            thread.join(timeout=1.0)
