import json

import numpy as np
import pytest
from PIL import Image

from jointcanvas import dataset, render
from jointcanvas import simworld as sw
from jointcanvas.errors import EmptyDemo, MissingMask


@pytest.fixture(scope="module")
def demo():
    _, d = sw.solvable_reset("press_button", 3)
    return d


@pytest.fixture(scope="module")
def pairs(demo):
    return dataset.extract_pairs(demo, K=20, stride=8)


@pytest.fixture()
def written(pairs, tmp_path):
    dataset.write_dataset(pairs, tmp_path)
    return tmp_path


class TestExtract:
    def test_count_and_labels(self, demo, pairs):
        assert len(pairs) == len(range(0, len(demo), 8))
        last = len(demo) - 1
        for p in pairs:
            t = p.meta["t"]
            assert p.meta["t_target"] == min(t + 20, last)
            a = np.array(p.meta["actions"])
            assert a.shape == (20, 8)
            assert np.allclose(a[-1, :7], demo.steps[min(t + 20, last)].config.q)
            assert p.prompt == demo.goal_text

    def test_backgrounds_identical_outside_mask(self, pairs):
        for p in pairs:
            outside = ~p.mask
            assert p.mask.any()
            assert np.array_equal(p.condition.pixels[outside], p.target.pixels[outside])

    def test_bad_args(self, demo):
        with pytest.raises(ValueError):
            dataset.extract_pairs(demo, K=0)
        short = sw.DemoRecord(demo.task_name, demo.goal_text, demo.seed, demo.steps[:1], demo.objects)
        with pytest.raises(EmptyDemo):
            dataset.extract_pairs(short)


class TestControllerSet:
    def test_random_backgrounds_keep_spheres(self, pairs):
        out = dataset.make_controller_set(pairs, seed=7)
        for p, q in zip(pairs, out):
            assert np.array_equal(q.condition.pixels[p.mask], p.target.pixels[p.mask])
            assert not np.array_equal(q.condition.pixels, p.condition.pixels)
            assert q.meta["actions"] == p.meta["actions"]

    def test_seeded(self, pairs):
        a = dataset.make_controller_set(pairs[:2], seed=7)
        b = dataset.make_controller_set(pairs[:2], seed=7)
        c = dataset.make_controller_set(pairs[:2], seed=8)
        assert np.array_equal(a[0].condition.pixels, b[0].condition.pixels)
        assert not np.array_equal(a[0].condition.pixels, c[0].condition.pixels)

    def test_missing_mask(self, pairs):
        from dataclasses import replace

        with pytest.raises(MissingMask):
            dataset.make_controller_set([replace(pairs[0], mask=None)], 0)


class TestManifest:
    def test_valid(self, written, pairs):
        assert dataset.validate_manifest(written) == []
        man = dataset.read_manifest(written)
        assert man.header["count"] == len(pairs) and len(man.records) == len(pairs)
        assert (written / "0000_000000_cond.png").exists()

    def test_hash_expectations(self, written, rig):
        assert dataset.validate_manifest(written, render.DEFAULT_PALETTE.digest(), dataset.rig_hash(rig)) == []
        kinds = {v.kind for v in dataset.validate_manifest(written, "0" * 16)}
        assert kinds == {"HashMismatch"}

    def test_missing_manifest(self, tmp_path):
        assert [v.kind for v in dataset.validate_manifest(tmp_path)] == ["MissingManifest"]

    def test_missing_file(self, written):
        (written / "0000_000000_target.png").unlink()
        assert "MissingFile" in {v.kind for v in dataset.validate_manifest(written)}

    def test_bad_dimensions(self, written):
        Image.fromarray(np.zeros((256, 256, 3), np.uint8)).save(written / "0000_000000_cond.png")
        assert "BadDimensions" in {v.kind for v in dataset.validate_manifest(written)}

    def test_tampered_content(self, written):
        px = render.read_png(written / "0000_000000_cond.png")
        px[0, 0] ^= 1
        render.write_png(written / "0000_000000_cond.png", px)
        assert {v.kind for v in dataset.validate_manifest(written)} == {"HashMismatch"}

    def _rewrite(self, d, fn):
        lines = (d / dataset.MANIFEST).read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        fn(recs)
        (d / dataset.MANIFEST).write_text("\n".join(json.dumps(r) for r in recs) + "\n")

    def test_empty_prompt(self, written):
        self._rewrite(written, lambda r: r[1].update(prompt="  "))
        assert {v.kind for v in dataset.validate_manifest(written)} == {"EmptyPrompt"}

    def test_bad_schema(self, written):
        self._rewrite(written, lambda r: r[1].pop("meta"))
        assert "BadSchema" in {v.kind for v in dataset.validate_manifest(written)}
        self._rewrite(written, lambda r: r[0].update(count=999))
        assert "BadSchema" in {v.kind for v in dataset.validate_manifest(written)}

    def test_unparseable(self, written):
        (written / dataset.MANIFEST).write_text("not json\n")
        assert [v.kind for v in dataset.validate_manifest(written)] == ["BadSchema"]
