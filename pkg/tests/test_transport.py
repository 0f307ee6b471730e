import struct
import threading
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from glasu.errors import ProtocolError
from glasu.federation import Average, ModelConfig, RoundConfig, train
from glasu.graph import partition_dataset
from glasu.sampling import LabelMode, LayerPlan, SamplerConfig
from glasu import transport as tp

GOLDEN = Path(__file__).parent / "golden"

ids = st.lists(st.integers(0, 2**32 - 1), max_size=20, unique=True).map(sorted)
mats = st.tuples(st.integers(0, 4), st.integers(0, 4)).flatmap(
    lambda s: hnp.arrays(np.float64, s, elements=st.floats(allow_nan=False, allow_infinity=False)))
messages = st.one_of(
    ids.map(tp.SampleBroadcast), ids.map(tp.IndexUpload), ids.map(tp.IndexUnionBroadcast),
    st.builds(tp.ReprUpload, st.integers(0, 255), mats),
    st.builds(tp.ReprBroadcast, st.integers(0, 255), mats),
    mats.map(tp.CotangentUpload), mats.map(tp.CotangentBroadcast),
    st.builds(tp.Control, st.sampled_from(list(tp.ControlKind)), st.integers(0, 2**32 - 1)))


@given(messages)
@settings(max_examples=200)
def test_roundtrip(msg):
    frame = tp.serialize(msg)
    back = tp.deserialize(frame)
    assert back == msg
    assert tp.serialize(back) == frame


def test_empty_index_payload_is_four_bytes():
    frame = tp.serialize(tp.IndexUpload([]))
    assert struct.unpack_from("<I", frame, 6)[0] == 4 and len(frame) == 14


def test_one_by_one_matrix_layout():
    frame = tp.serialize(tp.CotangentBroadcast(np.array([[2.5]])))
    assert len(frame) - 10 == 4 + 4 + 8
    assert frame[-8:] == struct.pack("<d", 2.5)


def test_repr_upload_golden():
    golden = (GOLDEN / "repr_upload.bin").read_bytes()
    msg = tp.ReprUpload(2, np.array([[2.5]]))
    assert tp.serialize(msg) == golden
    assert tp.deserialize(golden) == msg


def test_decode_errors():
    frame = tp.serialize(tp.SampleBroadcast([1, 2, 3]))
    with pytest.raises(ProtocolError, match="GLSU"):
        tp.deserialize(b"GLSX" + frame[4:])
    with pytest.raises(ProtocolError, match="version"):
        tp.deserialize(frame[:4] + b"\x02" + frame[5:])
    with pytest.raises(ProtocolError, match="tag"):
        tp.deserialize(frame[:5] + b"\x63" + frame[6:])
    with pytest.raises(ProtocolError, match="truncated"):
        tp.deserialize(frame[:-1])
    with pytest.raises(ProtocolError, match="truncated"):
        tp.deserialize(frame[:6] + struct.pack("<I", 1000) + frame[10:])
    with pytest.raises(ProtocolError, match="trailing"):
        tp.deserialize(frame + b"\0")
    with pytest.raises(ProtocolError, match="offset"):
        tp.deserialize(frame[:3])


def test_message_invariants():
    with pytest.raises(ProtocolError):
        tp.IndexUpload([3, 1])
    with pytest.raises(ProtocolError):
        tp.ReprUpload(0, np.array([[np.nan]]))
    with pytest.raises(ProtocolError):
        tp.ReprUpload(256, np.zeros((1, 1)))


def test_equality_is_bitwise():
    assert tp.CotangentUpload(np.array([[0.0]])) != tp.CotangentUpload(np.array([[-0.0]]))
    assert tp.IndexUpload([1]) != tp.SampleBroadcast([1])


def test_expected_counts_examples():
    c = tp.expected_counts(LayerPlan(4, (0, 1, 2, 3)), 3, 1, 1)
    assert c["ReprUpload"] + c["ReprBroadcast"] == 16
    base = tp.expected_counts(LayerPlan.uniform(4, 4), 3, 10, 1)
    lazy = tp.expected_counts(LayerPlan.uniform(4, 2), 3, 10, 4)
    ratio = tp.aggregation_messages_per_update(lazy, 10, 4) / tp.aggregation_messages_per_update(base, 10, 1)
    assert ratio == 1 / 8
    # more local iterations do not change the per-round message count
    assert tp.expected_counts(LayerPlan(4, (1, 3)), 3, 2, 1) == tp.expected_counts(LayerPlan(4, (1, 3)), 3, 2, 7)
    single = tp.expected_counts(LayerPlan(2, (1,)), 2, 1, 1, LabelMode.SINGLE_HOLDER)
    assert single["CotangentUpload"] == single["CotangentBroadcast"] == 1


def _run(part, plan, M, T, Q, mode, hidden=4, transport="inproc"):
    _, hist = train(part, plan, RoundConfig(T, Q, 0.1, mode), SamplerConfig(6, 2), Average(), 0,
                    model=ModelConfig(hidden_dim=hidden), transport=transport)
    return hist.ledger


def test_measured_ledger_matches_expected(sbm6):
    rng = np.random.default_rng(0)
    for _ in range(5):
        L, M = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        mode = LabelMode.SINGLE_HOLDER if rng.random() < 0.5 else LabelMode.ALL_CLIENTS
        agg = sorted(set(rng.choice(L, size=int(rng.integers(1, L + 1)), replace=False).tolist()) | (
            {L - 1} if mode is LabelMode.SINGLE_HOLDER else set()))
        plan = LayerPlan(L, tuple(agg))
        T, Q = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ledger = _run(partition_dataset(sbm6, M, 0.8, 0), plan, M, T, Q, mode)
        assert ledger.counts() == tp.expected_counts(plan, M, T, Q, mode)


def test_ledger_totals_and_edge_cases(sbm6):
    part = partition_dataset(sbm6, 2, 0.8, 0)
    plan = LayerPlan(2, (0, 1))
    assert _run(part, plan, 2, 0, 1, LabelMode.ALL_CLIENTS).total_messages == 0
    small = _run(part, plan, 2, 2, 1, LabelMode.ALL_CLIENTS, hidden=4)
    big = _run(part, plan, 2, 2, 1, LabelMode.ALL_CLIENTS, hidden=8)
    assert big.total_bytes > small.total_bytes and big.counts() == small.counts()
    total = Counter()
    for rec in small.rounds.values():
        total.update(rec.counts)
    assert total == small.counts()


def test_broadcast_bytes_charge_every_receiver():
    link, clients = tp.inproc_pair(3)
    msg = tp.SampleBroadcast([1, 2])
    link.broadcast(msg)
    assert link.ledger.byte_totals()["SampleBroadcast"] == 3 * len(tp.serialize(msg))
    assert all(c.recv() == msg for c in clients)
    link.broadcast(tp.Control(tp.ControlKind.BEGIN, 0))
    assert link.ledger.total_messages == 1


def test_closed_peer_raises():
    link, clients = tp.inproc_pair(1)
    clients[0].close()
    with pytest.raises(ProtocolError, match="closed"):
        link.recv(0)
    link.close()
    with pytest.raises(ProtocolError, match="closed"):
        clients[0].recv()


def test_tcp_link_roundtrip_and_hangup():
    server = tp.TcpServerLink(2, port=0)
    clients = []
    th = threading.Thread(target=lambda: clients.extend(tp.TcpClientLink(m, *server.address) for m in range(2)))
    th.start()
    server.accept()
    th.join()
    msg = tp.ReprUpload(1, np.arange(6.0).reshape(2, 3))
    clients[1].send(msg)
    assert server.recv(1) == msg
    server.broadcast(tp.SampleBroadcast([4, 9]))
    assert [c.recv() for c in clients] == [tp.SampleBroadcast([4, 9])] * 2
    clients[0].close()
    with pytest.raises(ProtocolError):
        server.recv(0)
    server.close()
    with pytest.raises(ProtocolError):
        clients[1].recv()


def test_tcp_unreachable():
    with pytest.raises(ProtocolError, match="cannot reach"):
        tp.TcpClientLink(0, "127.0.0.1", 1)
