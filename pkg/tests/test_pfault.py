import time
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultforge import pfault
from faultforge.errors import MountError
from faultforge.fixtures import populated_image
from faultforge.simstore import ImageView, Store

BS = 4096


@pytest.fixture(scope="module")
def image():
    return populated_image()


def manifest_blocks(result, idx=0):
    return sorted(m.lba for m in result.manifest if m.image == idx)


def test_single_block_listed(image):
    res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 1, seed=4), [image])
    assert len(res.manifest) == 1
    assert pfault.image_diff(image, res.images[0].image) == manifest_blocks(res)


def test_zero_blocks_identity(image):
    res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 0), [image])
    assert res.images[0].image == image and res.manifest == []


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), blocks=st.integers(1, 12), n_images=st.integers(1, 3))
def test_manifest_equals_diff_property(seed, blocks, n_images):
    images = [populated_image(seed=i) for i in range(n_images)]
    res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, blocks, seed), images)
    assert len(res.manifest) == blocks
    for i, original in enumerate(images):
        assert pfault.image_diff(original, res.images[i].image) == manifest_blocks(res, i)


def test_only_metadata_touched(image):
    sb = ImageView(image).sb
    meta = set(range(sb.data_start)) | {sb.backup_lba}
    for seed in range(30):
        res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 5, seed), [image])
        assert set(manifest_blocks(res)) <= meta


def test_weighted_toward_bitmap_and_table(image):
    sb = ImageView(image).sb
    hot = set(range(sb.bitmap_start, sb.table_start + sb.table_blocks))
    hits = total = 0
    for seed in range(300):
        res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 1, seed), [image])
        hits += res.manifest[0].lba in hot
        total += 1
    # 3 hot blocks at weight 4 against 18 cold blocks at weight 1: expect 12/30
    assert 0.3 < hits / total < 0.5


def test_deterministic(image):
    model = pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 4, seed=9)
    a, b = pfault.apply(model, [image]), pfault.apply(model, [image])
    assert [i.image for i in a.images] == [i.image for i in b.images]
    assert a.manifest_text() == b.manifest_text()


def test_clipping_warns(image):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 500, seed=1), [image])
    assert caught and "clipped" in str(caught[0].message)
    assert res.warnings and len(res.manifest) == len(pfault.image_diff(image, res.images[0].image))


def test_manifest_format(image):
    res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 2, seed=1), [image, image])
    lines = res.manifest_text().splitlines()
    assert lines[0] == "image 0" and "image 1" in lines
    for line in lines:
        assert line.startswith("image ") or line.split()[0] == "block"


def test_whole_device_failure(image):
    res = pfault.apply(pfault.FaultModel(pfault.WHOLE_DEVICE), [image])
    faulted = res.images[0]
    assert faulted.failed and faulted.image == image
    with pytest.raises(MountError) as err:
        Store.mount(faulted.device())
    assert err.value.errno == -5
    out = pfault.post_fault_check(res, [image])
    assert out[0].label() == "CheckerFailed(device-error)"


def test_bitmap_corruption_recovers(image):
    sb = ImageView(image).sb
    corrupted = bytearray(image)
    corrupted[sb.bitmap_start * BS] ^= 0x80
    res = pfault.FaultResult([pfault.FaultedImage(bytes(corrupted))])
    assert pfault.post_fault_check(res, [image])[0].outcome == pfault.RECOVERED


def test_superblock_corruption_recovers_via_backup(image):
    corrupted = bytes(BS) + image[BS:]
    res = pfault.FaultResult([pfault.FaultedImage(corrupted)])
    out = pfault.post_fault_check(res, [image])[0]
    assert out.outcome == pfault.RECOVERED
    assert any("BadSuperblock" in f for f in out.findings)


def test_table_loss_is_data_loss(image):
    sb = ImageView(image).sb
    corrupted = image[:sb.table_start * BS] + bytes(BS) + image[(sb.table_start + 1) * BS:]
    res = pfault.FaultResult([pfault.FaultedImage(corrupted)])
    out = pfault.post_fault_check(res, [image])[0]
    assert out.outcome == pfault.DATA_LOSS and out.reason == "a,b,c"


def test_unrepairable(image):
    corrupted = bytes(BS) + image[BS:-BS] + bytes(BS)
    res = pfault.FaultResult([pfault.FaultedImage(corrupted)])
    assert pfault.post_fault_check(res, [image])[0].label() == "CheckerFailed(unrepairable)"


def test_watchdog_timeout(image):
    out = pfault.check_one(0, pfault.FaultedImage(image), timeout=0.05,
                           checker=lambda dev: time.sleep(1))
    assert out.label() == "CheckerFailed(timeout)"


def test_checker_abort(image):
    def boom(dev):
        raise RuntimeError("assertion in checker")

    out = pfault.check_one(0, pfault.FaultedImage(image), checker=boom)
    assert out.outcome == pfault.CHECKER_FAILED and out.reason.startswith("abort")


def test_bad_model():
    with pytest.raises(ValueError):
        pfault.FaultModel("network-partition")
    with pytest.raises(ValueError):
        pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, -1)
