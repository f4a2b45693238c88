"""Frame/artifact codec: byte-level oracles, round trips, malformed input."""

import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfusion import wire
from fedfusion.errors import (ArtifactMismatchError, BadMagicError, CodecError,
                              LengthOverflowError, MalformedPayloadError,
                              TruncatedFrameError, UnknownTagError,
                              UnsupportedVersionError)
from fedfusion.models import build_model
from fedfusion.wire import (GlobalModel, LocalUpdate, ModelArtifact, Register,
                            RoundResult, Shutdown, artifact_from_model, decode,
                            decode_artifact, encode, encode_artifact,
                            load_artifact, load_artifact_into_model,
                            model_from_artifact, recv_message, save_artifact,
                            send_message)


def tiny_artifact(n=10, arch=1, seed=0):
    rng = np.random.default_rng(seed)
    return ModelArtifact(arch, (("w", (n,)),), rng.standard_normal(n).astype(np.float32))


class TestFrameBytes:
    def test_register_exact_bytes(self):
        frame = encode(Register(7))
        assert frame == b"FLNG" + bytes([1, 0x01]) + struct.pack("<I", 4) + struct.pack("<I", 7)

    def test_shutdown_exact_bytes(self):
        assert encode(Shutdown()) == b"FLNG" + bytes([1, 0x05]) + struct.pack("<I", 0)

    def test_round_result_exact_bytes(self):
        frame = encode(RoundResult(3, True, 0.875))
        payload = struct.pack("<IBd", 3, 1, 0.875)
        assert frame == b"FLNG" + bytes([1, 0x04]) + struct.pack("<I", len(payload)) + payload

    def test_global_model_length_oracle(self):
        # header 10; payload = round 4 + arch 2 + count 4
        #   + entry (name_len 4 + "w" 1 + ndims 4 + dim 4) + param count 8 + 10 f32
        art = tiny_artifact(10)
        frame = encode(GlobalModel(2, art))
        expected_payload = 4 + 2 + 4 + (4 + 1 + 4 + 4) + 8 + 10 * 4
        assert len(frame) == 10 + expected_payload
        assert struct.unpack("<I", frame[6:10])[0] == expected_payload

    def test_little_endian_params(self):
        art = ModelArtifact(1, (("w", (1,)),), np.array([1.0], dtype=np.float32))
        blob = encode_artifact(art)
        assert blob.endswith(struct.pack("<f", 1.0))


class TestRoundTrips:
    @pytest.mark.parametrize("msg", [
        Register(0),
        Register(2**32 - 1),
        RoundResult(5, False, 0.0),
        RoundResult(0, True, 1.0),
        Shutdown(),
    ])
    def test_simple_messages(self, msg):
        assert decode(encode(msg)) == msg

    def test_global_model(self):
        msg = GlobalModel(4, tiny_artifact(23, arch=3))
        back = decode(encode(msg))
        assert back.round == 4 and back.artifact == msg.artifact

    def test_local_update(self):
        msg = LocalUpdate(9, 2, 0.625, tiny_artifact(7, arch=2))
        back = decode(encode(msg))
        assert back == msg

    def test_real_model_artifact(self):
        m = build_model("inception", seed=3)
        art = artifact_from_model(m)
        back = decode_artifact(encode_artifact(art))
        assert back == art
        assert back.params.dtype == np.float32

    def test_artifact_file_round_trip(self, tmp_path):
        art = artifact_from_model(build_model("dense", seed=1))
        path = tmp_path / "model.bin"
        save_artifact(path, art)
        assert load_artifact(path) == art

    def test_quantization_is_idempotent(self):
        # f64 -> f32 loses precision once; a second trip through the codec is exact
        m = build_model("vgg", seed=0)
        a1 = artifact_from_model(m)
        m2 = model_from_artifact(a1)
        a2 = artifact_from_model(m2)
        assert a1 == a2


class TestHeaderValidation:
    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            decode(b"GNLF" + encode(Shutdown())[4:])

    def test_unsupported_version(self):
        frame = bytearray(encode(Shutdown()))
        frame[4] = 2
        with pytest.raises(UnsupportedVersionError):
            decode(bytes(frame))

    def test_unknown_tag(self):
        frame = bytearray(encode(Shutdown()))
        frame[5] = 0x77
        with pytest.raises(UnknownTagError):
            decode(bytes(frame))

    def test_truncated_header(self):
        with pytest.raises(TruncatedFrameError):
            decode(b"FLNG\x01")

    def test_truncated_payload(self):
        with pytest.raises(TruncatedFrameError):
            decode(encode(Register(1))[:-2])

    def test_trailing_garbage(self):
        with pytest.raises(MalformedPayloadError):
            decode(encode(Register(1)) + b"x")

    def test_declared_length_overflow(self):
        frame = b"FLNG" + bytes([1, 0x01]) + struct.pack("<I", wire.MAX_PAYLOAD + 1)
        with pytest.raises(LengthOverflowError):
            decode(frame)


class TestPayloadValidation:
    def test_accuracy_out_of_range(self):
        payload = struct.pack("<IId", 1, 1, 1.5) + encode_artifact(tiny_artifact())
        frame = b"FLNG" + bytes([1, 0x03]) + struct.pack("<I", len(payload)) + payload
        with pytest.raises(MalformedPayloadError):
            decode(frame)

    def test_bad_promoted_flag(self):
        payload = struct.pack("<IBd", 1, 2, 0.5)
        frame = b"FLNG" + bytes([1, 0x04]) + struct.pack("<I", len(payload)) + payload
        with pytest.raises(MalformedPayloadError):
            decode(frame)

    def test_unknown_arch_id(self):
        blob = bytearray(encode_artifact(tiny_artifact(arch=4)))
        blob[0] = 9
        with pytest.raises(MalformedPayloadError):
            decode_artifact(bytes(blob))

    def test_param_count_mismatch(self):
        blob = bytearray(encode_artifact(tiny_artifact(10)))
        # u64 param count sits 8 bytes before the 40-byte f32 block
        struct.pack_into("<Q", blob, len(blob) - 40 - 8, 11)
        with pytest.raises(MalformedPayloadError):
            decode_artifact(bytes(blob))

    def test_non_utf8_name(self):
        art = tiny_artifact()
        blob = bytearray(encode_artifact(art))
        blob[10] = 0xFF  # name byte of the single entry "w"
        with pytest.raises(MalformedPayloadError):
            decode_artifact(bytes(blob))

    def test_manifest_total_checked_at_build(self):
        with pytest.raises(ArtifactMismatchError):
            ModelArtifact(1, (("w", (3,)),), np.zeros(4, dtype=np.float32))


class TestModelLoading:
    def test_load_round_trip_predictions_match(self):
        rng = np.random.default_rng(4)
        m = build_model("vgg", seed=5)
        clone = model_from_artifact(artifact_from_model(m))
        x = rng.random((3, 32, 32, 1))
        # f32 storage perturbs params, so rebuild m from the same artifact
        load_artifact_into_model(m, artifact_from_model(m))
        np.testing.assert_array_equal(m.predict_proba(x), clone.predict_proba(x))

    def test_arch_mismatch_rejected(self):
        art = artifact_from_model(build_model("vgg", seed=0))
        with pytest.raises(ArtifactMismatchError):
            load_artifact_into_model(build_model("dense", seed=0), art)

    def test_layout_mismatch_rejected(self):
        m = build_model("vgg", seed=0)
        art = artifact_from_model(m)
        bad = ModelArtifact(art.arch, tuple(art.layout[:-1]) + (("oops", art.layout[-1][1]),),
                            art.params)
        with pytest.raises(ArtifactMismatchError):
            load_artifact_into_model(m, bad)


class TestFuzzing:
    @settings(max_examples=300, deadline=None)
    @given(st.binary(min_size=0, max_size=64))
    def test_random_bytes_never_crash(self, blob):
        try:
            decode(blob)
        except CodecError:
            pass

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 3))
    def test_mutated_valid_frames(self, seed, which):
        rng = np.random.default_rng(seed)
        msgs = [Register(1), GlobalModel(1, tiny_artifact(5)),
                LocalUpdate(1, 1, 0.5, tiny_artifact(5)), RoundResult(1, True, 0.5)]
        frame = bytearray(encode(msgs[which]))
        for _ in range(rng.integers(1, 4)):
            op = rng.integers(0, 3)
            if op == 0 and len(frame) > 0:
                frame[rng.integers(0, len(frame))] = rng.integers(0, 256)
            elif op == 1 and len(frame) > 1:
                frame = frame[: rng.integers(0, len(frame))]
            else:
                frame += bytes(rng.integers(0, 256, rng.integers(1, 8), dtype=np.uint8))
        try:
            decode(bytes(frame))
        except CodecError:
            pass


class TestSocketFraming:
    def test_loopback_send_recv(self):
        server, client = socket.socketpair()
        try:
            messages = [Register(3), GlobalModel(1, tiny_artifact(50, arch=2)),
                        RoundResult(1, False, 0.25), Shutdown()]
            def pump():
                for m in messages:
                    send_message(client, m)
            t = threading.Thread(target=pump)
            t.start()
            received = [recv_message(server) for _ in messages]
            t.join()
            assert received == messages
        finally:
            server.close()
            client.close()

    def test_closed_connection_mid_frame(self):
        server, client = socket.socketpair()
        try:
            client.sendall(encode(Register(1))[:6])
            client.close()
            with pytest.raises(TruncatedFrameError):
                recv_message(server)
        finally:
            server.close()
