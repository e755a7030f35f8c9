import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from eyesynth.data import (
    FrameRecord,
    Manifest,
    ManifestError,
    format_record,
    load_image,
    load_manifest,
    parse_record,
    save_image,
    save_manifest,
    split_dataset,
)


def write_png(path, value, size=(4, 4)):
    Image.fromarray(np.full((*size, 3), value, dtype=np.uint8), mode="RGB").save(path)
    return path


def screen_lines(n, tmp_path):
    lines = []
    for i in range(n):
        write_png(tmp_path / f"f{i}.png", 10 * i)
        lines.append(f"image=f{i}.png\tscreen2d={i}.5,-{i}.25\tdevice=phone\torientation=portrait")
    return lines


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("")
    m = load_manifest(p)
    assert len(m) == 0 and m.label_kind == "none"


def test_three_screen_records(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("\n".join(screen_lines(3, tmp_path)) + "\n")
    m = load_manifest(p)
    assert len(m) == 3 and m.label_kind == "screen2d"
    assert m[1].screen2d == (1.5, -1.25)


def test_mask_ratio_out_of_range_names_field(tmp_path):
    write_png(tmp_path / "a.png", 0)
    p = tmp_path / "m.txt"
    p.write_text("image=a.png\tmask_ratio=1.5\n")
    with pytest.raises(ManifestError, match="mask_ratio") as info:
        load_manifest(p)
    assert info.value.line == 1


def test_malformed_line_reports_line_number(tmp_path):
    lines = screen_lines(2, tmp_path)
    lines.insert(1, "image=x.png\tscreen2d=1,oops")
    p = tmp_path / "m.txt"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)


def test_mixed_label_kinds_rejected(tmp_path):
    write_png(tmp_path / "a.png", 0)
    write_png(tmp_path / "b.png", 0)
    p = tmp_path / "m.txt"
    p.write_text("image=a.png\tscreen2d=1,2\nimage=b.png\tgaze3d=0,0,1\n")
    with pytest.raises(ManifestError, match="mixed"):
        load_manifest(p)


def test_duplicate_and_missing_images(tmp_path):
    write_png(tmp_path / "a.png", 0)
    p = tmp_path / "m.txt"
    p.write_text("image=a.png\nimage=a.png\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(p)
    p.write_text("image=missing.png\n")
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(p)


def test_unknown_key_and_bad_orientation():
    with pytest.raises(ManifestError, match="unknown key"):
        parse_record("image=a.png\tcolour=red")
    with pytest.raises(ManifestError, match="orientation"):
        parse_record("image=a.png\torientation=sideways")


def test_gaze_norm_validated():
    with pytest.raises(ManifestError, match="norm"):
        FrameRecord(image="a.png", gaze3d=(0.0, 0.0, 1.01))
    FrameRecord(image="a.png", gaze3d=(0.0, 0.6, 0.8))


def test_required_fields(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("\n".join(screen_lines(2, tmp_path)) + "\n")
    with pytest.raises(ManifestError, match="rot_deg"):
        load_manifest(p, require=("rot_deg",))


def test_round_trip_is_byte_identical(tmp_path):
    write_png(tmp_path / "a.png", 0)
    write_png(tmp_path / "b.png", 0)
    text = (
        "image=a.png\tscreen2d=1.5,-2.0\tlandmarks=0.1,0.2;0.3,0.4\trot_deg=3.25\tdevice=ph\t"
        "orientation=landscape_left\ttilt=1.0\tpan=-2.0\troll=0.5\tsharpness=0.01\tmask_ratio=0.3\n"
        "image=b.png\tscreen2d=0.1,0.2\n"
    )
    p = tmp_path / "m.txt"
    p.write_bytes(text.encode())
    save_manifest(load_manifest(p), tmp_path / "out.txt")
    assert (tmp_path / "out.txt").read_bytes() == text.encode()


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(x=finite, y=finite, rot=finite, lm=st.lists(st.tuples(finite, finite), min_size=2, max_size=5),
       ratio=st.floats(0, 1))
def test_record_text_round_trip(x, y, rot, lm, ratio):
    rec = FrameRecord(image="a b.png", screen2d=(x, y), rot_deg=rot, landmarks=tuple(lm), mask_ratio=ratio)
    assert parse_record(format_record(rec)) == rec


def test_image_endpoints(tmp_path):
    assert np.all(load_image(write_png(tmp_path / "k.png", 0), 8) == -1.0)
    assert np.all(load_image(write_png(tmp_path / "w.png", 255), 8) == 1.0)
    gray = load_image(write_png(tmp_path / "g.png", 128), 8)
    assert gray.shape == (8, 8, 3)
    np.testing.assert_allclose(gray, 128 / 127.5 - 1, rtol=0, atol=1e-7)
    assert abs(float(gray[0, 0, 0]) - 0.00392156862745098) < 1e-7


def test_image_save_load_within_quantization(tmp_path, rng):
    img = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png", 16)
    assert np.max(np.abs(back - img)) <= 1 / 127.5


def test_undecodable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(tmp_path / "bad.png")


def _manifest(n):
    return Manifest(tuple(FrameRecord(image=f"{i}.png", screen2d=(i, 0.0)) for i in range(n)))


def test_split_sizes_and_determinism():
    m = _manifest(10)
    a = split_dataset(m, (0.8, 0.1, 0.1), seed=7)
    b = split_dataset(m, (0.8, 0.1, 0.1), seed=7)
    assert tuple(len(p) for p in a) == (8, 1, 1)
    assert a == b


def test_split_is_partition():
    m = _manifest(37)
    parts = split_dataset(m, (0.5, 0.3, 0.2), seed=3)
    names = [r.image for p in parts for r in p]
    assert sorted(names) == sorted(r.image for r in m)
    assert len(set(names)) == len(names)


def test_split_empty_and_invalid():
    assert all(len(p) == 0 for p in split_dataset(_manifest(0), (0.8, 0.1, 0.1), 0))
    with pytest.raises(ValueError):
        split_dataset(_manifest(3), (0.5, 0.5, 0.5), 0)


def test_split_seed_changes_membership():
    m = _manifest(50)

    def membership(seed):
        parts = split_dataset(m, (0.6, 0.2, 0.2), seed)
        return [next(k for k, p in enumerate(parts) if r in p.records) for r in m]

    assert membership(1) != membership(2)
