import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmed import data
from advmed.provenance import REGISTRY_HEADER, DuplicateImageError, HashRegistry, Status

import numpy as np


def fixed_clock():
    return "2020-01-01T00:00:00Z"


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=256))
def test_register_then_verify_matches(b):
    reg = HashRegistry(clock=fixed_clock)
    reg.register("x", b)
    assert reg.verify("x", b) is Status.MATCH


def test_unknown_and_duplicate():
    reg = HashRegistry()
    assert reg.verify("nope", b"abc") is Status.UNKNOWN
    reg.register("a", b"abc")
    with pytest.raises(DuplicateImageError):
        reg.register("a", b"abc")


def test_every_single_byte_flip_is_tampered():
    buf = data.encode_image(np.random.default_rng(0).uniform(size=(1, 4, 4)))
    reg = HashRegistry()
    reg.register("img", buf)
    for i in range(len(buf)):
        for bit in (0x01, 0x80):
            mutated = bytearray(buf)
            mutated[i] ^= bit
            assert reg.verify("img", bytes(mutated)) is Status.TAMPERED


def test_one_quantization_step_is_tampered():
    px = np.full((1, 4, 4), 100 / 255)
    reg = HashRegistry()
    reg.register("img", data.encode_image(px))
    px2 = px.copy()
    px2[0, 2, 1] += 1 / 255
    assert reg.verify("img", data.encode_image(px2)) is Status.TAMPERED
    # re-encoding unmodified pixels passes
    assert reg.verify("img", data.encode_image(px.copy())) is Status.MATCH


def test_persistence_round_trip(tmp_path):
    path = tmp_path / "reg.csv"
    reg = HashRegistry(path, clock=fixed_clock)
    reg.register("a", b"one", source="cam1")
    reg.register("b", b"two")
    assert path.read_text().splitlines()[0] == ",".join(REGISTRY_HEADER)
    again = HashRegistry(path)
    assert len(again) == 2 and "a" in again
    for iid, b in (("a", b"one"), ("b", b"two"), ("a", b"two"), ("c", b"x")):
        assert again.verify(iid, b) is reg.verify(iid, b)
    assert again.entries["a"].source == "cam1"
    again.register("c", b"three")
    assert len(HashRegistry(path)) == 3


def test_registry_file_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,digest\n")
    with pytest.raises(ValueError):
        HashRegistry(tmp_path / "bad.csv")
    (tmp_path / "dup.csv").write_text(",".join(REGISTRY_HEADER) + "\na,00,t,s\na,11,t,s\n")
    with pytest.raises(DuplicateImageError):
        HashRegistry(tmp_path / "dup.csv")


def test_concurrent_registration(tmp_path):
    reg = HashRegistry(tmp_path / "reg.csv")
    threads = [threading.Thread(target=reg.register, args=(f"i{k}", bytes([k]))) for k in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(HashRegistry(tmp_path / "reg.csv")) == 32
