import socket
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from evolute import service, sim, trajectories as tr, wsutil
from evolute.errors import ProtocolError
from evolute.service import Action, Bye, Control, Frame, Hello, PROTOCOL_VERSION, \
    RawChannel, Server, decode_message, encode_message
from evolute.sim import ActionPair, SimConfig

FAST_SIM = SimConfig(seed=5, tick_rate=200.0, episode_length=0.5,
                     n_rays=8, grid_res=4, n_obstacles=2, n_enemies=1)


# --- codec ------------------------------------------------------------------

ALL_MESSAGES = [
    Hello(protocol_version=1),
    Hello(protocol_version=1, sim={"arena_size": 200.0, "seed": 3}),
    Frame(tick=7, world={"arena_size": 200.0, "player": {"x": 1.0}},
          telemetry=[1.0, 2.0, 1.0, 0.0, 0.0, 3.0],
          events={"kill": False, "crashed": False, "episode_over": False, "reason": "none"},
          recording={"on": True, "samples": 12}),
    Frame(tick=8, world={}, telemetry=[], events={}, recording={},
          notice={"kind": "saved", "name": "x.evtraj", "samples": 100}),
    Action(tick=3, continuous=(0.25, 0.5), discrete=(1, 0)),
    Control(command="start"),
    Control(command="save", name="run-1"),
    Bye(reason="done"),
]


@pytest.mark.parametrize("message", ALL_MESSAGES, ids=lambda m: type(m).__name__)
def test_codec_round_trip(message):
    assert decode_message(encode_message(message)) == message


def test_decode_rejects_unknown_type():
    record = encode_message(Bye()).replace(b'"bye"', b'"zap"')
    with pytest.raises(ProtocolError, match="zap"):
        decode_message(record)


def test_decode_rejects_unknown_control_command():
    record = encode_message(Control(command="start")).replace(b'"start"', b'"jump!"')
    with pytest.raises(ProtocolError, match="jump!"):
        decode_message(record)


def test_decode_rejects_truncated_record():
    record = encode_message(Hello(protocol_version=1))
    with pytest.raises(ProtocolError, match="framing"):
        decode_message(record[:-3])
    with pytest.raises(ProtocolError, match="framing"):
        decode_message(record[:2])


def test_decode_rejects_missing_fields():
    bad = b'{"type": "action", "tick": 1}'
    import struct
    with pytest.raises(ProtocolError, match="action"):
        decode_message(struct.pack("!I", len(bad)) + bad)


# --- websocket helpers --------------------------------------------------------

def test_ws_accept_key_rfc_example():
    assert wsutil.accept_key("dGhlIHNhbXBsZSBub25jZQ==") == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo="


def test_ws_frame_mask_round_trip():
    payload = b"hello \x00\x01\x02 world" * 20
    frame = wsutil.encode_frame(payload, wsutil.OP_BINARY, mask=b"abcd")
    buffer = bytearray(frame)

    def recv_exact(n):
        out = bytes(buffer[:n])
        del buffer[:n]
        return out

    fin, opcode, decoded = wsutil.read_frame(recv_exact)
    assert fin and opcode == wsutil.OP_BINARY
    assert decoded == payload


def test_ws_extended_length_frames():
    payload = bytes(range(256)) * 300   # > 64 KiB triggers the 8-byte length
    frame = wsutil.encode_frame(payload, wsutil.OP_BINARY)
    buffer = bytearray(frame)

    def recv_exact(n):
        out = bytes(buffer[:n])
        del buffer[:n]
        return out

    fin, opcode, decoded = wsutil.read_frame(recv_exact)
    assert decoded == payload


# --- live sessions -------------------------------------------------------------

class Client:
    def __init__(self, address, timeout=20.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.channel = RawChannel(self.sock)

    def send(self, message):
        self.channel.send_record(encode_message(message))

    def recv(self):
        record = self.channel.recv_record()
        return None if record is None else decode_message(record)

    def recv_until(self, predicate, limit=5000):
        for _ in range(limit):
            message = self.recv()
            if message is None:
                raise AssertionError("connection closed while waiting")
            if predicate(message):
                return message
        raise AssertionError("predicate never satisfied")

    def close(self):
        self.channel.close()


@pytest.fixture
def server(tmp_path):
    srv = Server(host="127.0.0.1", port=0, sim_config=FAST_SIM,
                 record_dir=tmp_path, realtime=False)
    srv.start()
    yield srv
    srv.stop()


def handshake(client):
    client.send(Hello(protocol_version=PROTOCOL_VERSION))
    reply = client.recv()
    assert isinstance(reply, Hello)
    assert reply.protocol_version == PROTOCOL_VERSION
    assert reply.sim["tick_rate"] == FAST_SIM.tick_rate
    return reply


def test_handshake_and_version_mismatch(server):
    client = Client(server.address)
    handshake(client)
    client.send(Bye())
    client.close()

    bad = Client(server.address)
    bad.send(Hello(protocol_version=99))
    reply = bad.recv()
    assert isinstance(reply, Bye)
    assert "version" in reply.reason
    bad.close()


def test_non_hello_first_message_rejected(server):
    client = Client(server.address)
    client.send(Control(command="start"))
    reply = client.recv()
    assert isinstance(reply, Bye)
    client.close()


def test_no_action_car_stays_at_rest(server):
    client = Client(server.address)
    handshake(client)
    client.send(Control(command="start"))
    frame = client.recv_until(lambda m: isinstance(m, Frame) and m.events.get("episode_over"))
    spawn = sim.reset(FAST_SIM).player.position
    assert frame.telemetry[0] == pytest.approx(spawn[0])
    assert frame.telemetry[1] == pytest.approx(spawn[1])
    assert frame.telemetry[4] == 0.0
    client.send(Bye())
    client.close()


def test_record_full_episode_and_replay_bit_exact(server, tmp_path):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=0, continuous=(0.7313, 0.5519), discrete=(0, 0)))
    client.send(Control(command="record_on"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.recording.get("on"))
    client.send(Control(command="start"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.events.get("episode_over"))
    client.send(Control(command="save", name="fidelity"))
    notice = client.recv_until(
        lambda m: isinstance(m, Frame) and m.notice and m.notice.get("kind") == "saved")
    assert notice.notice["samples"] == FAST_SIM.max_ticks
    client.send(Bye())
    client.close()

    loaded = tr.load(tmp_path / "fidelity.evtraj")
    assert len(loaded) == 1
    recorded = loaded[0]
    assert recorded.source == "human"
    assert len(recorded) == FAST_SIM.max_ticks

    # Offline replay through the simulator reproduces every observation.
    state = sim.reset(FAST_SIM)
    for i in range(len(recorded)):
        flat = sim.observe(state).flatten()
        assert np.array_equal(flat, recorded.observations[i]), f"tick {i} diverged"
        action = ActionPair(
            throttle=float(recorded.continuous[i, 0]),
            steering=float(recorded.continuous[i, 1]),
            fire_primary=int(recorded.discrete[i, 0]),
            fire_secondary=int(recorded.discrete[i, 1]),
        )
        state, _ = sim.step(state, action)


def test_zero_order_hold_applies_last_action(server, tmp_path):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=0, continuous=(1.0, 0.25), discrete=(1, 0)))
    client.send(Control(command="record_on"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.recording.get("on"))
    client.send(Control(command="start"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.events.get("episode_over"))
    client.send(Control(command="save", name="hold"))
    client.recv_until(
        lambda m: isinstance(m, Frame) and m.notice and m.notice.get("kind") == "saved")
    client.send(Bye())
    client.close()

    recorded = tr.load(tmp_path / "hold.evtraj")[0]
    expected = np.float32([1.0, 0.25])
    assert np.all(recorded.continuous == expected)
    assert np.all(recorded.discrete[:, 0] == 1.0)


def test_stale_action_tick_rejected_with_warning(server):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=5, continuous=(0.5, 0.5), discrete=(0, 0)))
    client.send(Action(tick=3, continuous=(0.9, 0.9), discrete=(0, 0)))
    warning = client.recv_until(
        lambda m: isinstance(m, Frame) and m.notice and m.notice.get("kind") == "warning")
    assert "stale" in warning.notice["message"]
    client.send(Bye())
    client.close()


def test_out_of_bounds_action_rejected_with_warning(server):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=0, continuous=(1.5, 0.5), discrete=(0, 0)))
    warning = client.recv_until(
        lambda m: isinstance(m, Frame) and m.notice and m.notice.get("kind") == "warning")
    assert "bounds" in warning.notice["message"]
    client.send(Bye())
    client.close()


def test_reset_control_restores_initial_world(server):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=0, continuous=(1.0, 0.5), discrete=(0, 0)))
    client.send(Control(command="start"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.tick >= 10)
    client.send(Control(command="pause"))
    client.send(Control(command="reset"))
    frame = client.recv_until(lambda m: isinstance(m, Frame) and m.tick == 0)
    spawn = sim.reset(FAST_SIM).player.position
    assert frame.telemetry[0] == pytest.approx(spawn[0])
    client.send(Bye())
    client.close()


def test_websocket_transport_same_port(server):
    sock = socket.create_connection(server.address, timeout=20.0)
    key = "dGhlIHNhbXBsZSBub25jZQ=="
    request = (
        "GET / HTTP/1.1\r\n"
        f"Host: {server.address[0]}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n\r\n"
    ).encode("ascii")
    sock.sendall(request)
    response = b""
    while b"\r\n\r\n" not in response:
        response += sock.recv(4096)
    assert b"101" in response.split(b"\r\n")[0]
    assert wsutil.accept_key(key).encode("ascii") in response

    def recv_exact(n):
        data = bytearray()
        while len(data) < n:
            chunk = sock.recv(n - len(data))
            if not chunk:
                break
            data += chunk
        return bytes(data)

    hello = encode_message(Hello(protocol_version=PROTOCOL_VERSION))
    sock.sendall(wsutil.encode_frame(hello, wsutil.OP_BINARY, mask=b"1234"))
    reply_record = wsutil.read_message(recv_exact, sock.sendall)
    reply = decode_message(reply_record)
    assert isinstance(reply, Hello)
    assert reply.sim is not None
    sock.sendall(wsutil.encode_frame(encode_message(Bye()), wsutil.OP_BINARY, mask=b"5678"))
    sock.close()


def test_saved_human_file_trains_ffbc(server, tmp_path):
    client = Client(server.address)
    handshake(client)
    client.send(Action(tick=0, continuous=(0.8, 0.45), discrete=(0, 1)))
    client.send(Control(command="record_on"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.recording.get("on"))
    client.send(Control(command="start"))
    client.recv_until(lambda m: isinstance(m, Frame) and m.events.get("episode_over"))
    client.send(Control(command="save", name="human"))
    client.recv_until(
        lambda m: isinstance(m, Frame) and m.notice and m.notice.get("kind") == "saved")
    client.send(Bye())
    client.close()

    from evolute import ffbc, nn
    from evolute.encoders import telemetry_scale_for

    dataset = tr.load(tmp_path / "human.evtraj")
    pool = tr.SamplePool.from_trajectories(dataset)
    model = ffbc.FfBcModel(pool.layout, telemetry_scale_for(FAST_SIM),
                           rng=np.random.default_rng(0))
    opt = nn.Adam(model.params_discrete())
    loss = ffbc.train_discrete_epoch(model, tr.batch_iter(pool, 32, seed=1), opt)
    assert np.isfinite(loss)
