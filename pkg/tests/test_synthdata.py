import itertools
import json
import math

import numpy as np
import pytest

from reidlm.synthdata import (ATTRIBUTE_SPACE, BASELINE_PROMPTS, HUES, IMAGE_CONTINUATION_INSTRUCTION,
                              REFERENCE_STATS, DataConfig, DatasetStats, IdentitySpec, build_dataset,
                              build_dialogue, concat_datasets, dataset_stats, gen_caption, gen_continuation,
                              load_dataset, parse_caption, read_ppm, save_dataset, word_count, write_ppm)


@pytest.fixture(scope="module")
def small():
    return build_dataset(num_train_ids=10, num_eval_ids=6, imgs_per_id=4, cams=2, seed=3)


def _ident(i, attrs):
    return IdentitySpec(i, *attrs)


def test_default_stats():
    s = dataset_stats(build_dataset())
    assert (s.ID_t, s.ID_q, s.ID_g, s.IMG_t, s.CAM_n) == (100, 50, 50, 800, 4)
    assert s.IMG_q == 50 * 2 and s.IMG_g == 50 * 6


def test_reference_table():
    assert REFERENCE_STATS["Market1501"] == dict(ID_q=750, ID_g=750, ID_t=751, IMG_q=3368, IMG_g=19732,
                                                 IMG_t=12936, CAM_n=6)


def test_determinism(small):
    again = build_dataset(num_train_ids=10, num_eval_ids=6, imgs_per_id=4, cams=2, seed=3)
    assert again.images.tobytes() == small.images.tobytes()
    other = build_dataset(num_train_ids=10, num_eval_ids=6, imgs_per_id=4, cams=2, seed=4)
    assert other.images.tobytes() != small.images.tobytes()


def test_split_protocol(small):
    train = {r.pid for r in small.records if r.split == "train"}
    evals = {r.pid for r in small.records if r.split != "train"}
    assert not train & evals
    for pid in evals:
        q = {r.cam for r in small.records if r.pid == pid and r.split == "query"}
        g = {r.cam for r in small.records if r.pid == pid and r.split == "gallery"}
        assert q and g and len(q | g) >= 2
    assert small.images.shape[1:] == (64, 32, 3)
    assert all(r.cam < small.config.cams for r in small.records)


def test_unique_attributes(small):
    tuples = [s.attributes for s in small.identities.values()]
    assert len(set(tuples)) == len(tuples)


def test_errors():
    with pytest.raises(ValueError):
        build_dataset(cams=1)
    with pytest.raises(ValueError):
        build_dataset(imgs_per_id=1)
    with pytest.raises(ValueError):
        build_dataset(num_train_ids=len(ATTRIBUTE_SPACE), num_eval_ids=1, imgs_per_id=2)


def test_domain_style_changes_render():
    a = build_dataset(num_train_ids=2, num_eval_ids=2, imgs_per_id=2, cams=2)
    b = build_dataset(num_train_ids=2, num_eval_ids=2, imgs_per_id=2, cams=2, domain_style=1)
    assert np.abs(a.images.astype(int) - b.images.astype(int)).mean() > 5


def test_caption_injective_and_length():
    caps = {gen_caption(_ident(i, t)) for i, t in enumerate(ATTRIBUTE_SPACE)}
    assert len(caps) == len(ATTRIBUTE_SPACE)
    counts = [word_count(c) for c in caps]
    assert 8 <= min(counts) and max(counts) <= 25


def test_caption_parse_round_trip():
    for i, t in enumerate(ATTRIBUTE_SPACE[::97]):
        a = parse_caption(gen_caption(_ident(i, t)))
        assert (a["shirt"], a["pants"], a["shoes"], a["hat"], a["bag"], a["build"]) == t
    assert parse_caption("a person in a purple coat") is None


def test_continuations_short_and_deterministic():
    lengths = []
    for i, t in enumerate(ATTRIBUTE_SPACE):
        cap = gen_caption(_ident(i, t))
        cont = gen_continuation(cap)
        lengths.append(word_count(cont))
    assert max(lengths) < 20
    cap = gen_caption(_ident(0, ATTRIBUTE_SPACE[5]))
    assert gen_continuation(cap) == gen_continuation(cap)


def test_continuation_distinguishes_pants():
    for shirt, p1, p2 in itertools.product(HUES, HUES, HUES):
        if p1 == p2:
            continue
        c1 = gen_continuation(gen_caption(IdentitySpec(0, shirt, p1, "black", "none", "none", "slim")))
        c2 = gen_continuation(gen_caption(IdentitySpec(0, shirt, p2, "black", "none", "none", "slim")))
        assert c1 != c2


def test_external_continuations():
    cap = gen_caption(IdentitySpec(0, "red", "blue", "black", "none", "none", "slim"))
    assert gen_continuation(cap, {cap: "custom text"}) == "custom text"
    with pytest.raises(KeyError):
        gen_continuation("unparseable caption", {})


def test_dialogue_modes():
    rng = np.random.default_rng(0)
    d = build_dialogue(0, "cap", "cont", "common_instruction")
    assert "continue the following image" in d.instruction and d.instruction == IMAGE_CONTINUATION_INSTRUCTION
    assert d.continuation == "cont"
    b = build_dialogue(0, "cap", "cont", "baseline_prompt", rng)
    assert b.continuation == "cap"
    assert any(p in b.instruction for p in BASELINE_PROMPTS)
    assert len(BASELINE_PROMPTS) == len(set(BASELINE_PROMPTS)) == 20
    with pytest.raises(ValueError):
        build_dialogue(0, "cap", "cont", "other", rng)
    with pytest.raises(ValueError):
        build_dialogue(0, "cap", "", "common_instruction")
    assert build_dialogue(0, "cap", "cont", "common_instruction", turns=3).T == 3


def test_baseline_prompt_uniform():
    rng = np.random.default_rng(11)
    n = 10_000
    counts = dict.fromkeys(BASELINE_PROMPTS, 0)
    for _ in range(n):
        d = build_dialogue(0, "cap", "cont", "baseline_prompt", rng)
        counts[next(p for p in BASELINE_PROMPTS if p in d.instruction)] += 1
    expected = n / 20
    sigma = math.sqrt(n * (1 / 20) * (19 / 20))
    assert all(abs(c - expected) <= 3 * sigma for c in counts.values())


def test_stats_additivity(small):
    other = build_dataset(num_train_ids=4, num_eval_ids=3, imgs_per_id=4, cams=3, seed=9, domain_style=1)
    assert dataset_stats(concat_datasets(small, other)) == dataset_stats(small) + dataset_stats(other)
    with pytest.raises(ValueError):
        DatasetStats(-1, 0, 0, 0, 0, 0, 0)


def test_empty_gallery_stats():
    d = build_dataset(num_train_ids=3, num_eval_ids=2, imgs_per_id=2, cams=2)
    d.records = [r for r in d.records if r.split != "gallery"]
    assert dataset_stats(d).IMG_g == 0


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(64, 32, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert (read_ppm(tmp_path / "x.ppm") == img).all()
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")


def test_save_load_round_trip(small, tmp_path):
    save_dataset(small, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert {"format_version", "config", "splits", "captions", "continuations"} <= set(man)
    back = load_dataset(tmp_path)
    assert back.images.tobytes() == small.images.tobytes()
    assert [(r.pid, r.cam, r.split) for r in back.records] == [(r.pid, r.cam, r.split) for r in small.records]
    assert back.captions == small.captions and back.continuations == small.continuations
    assert load_dataset(tmp_path, with_text=False).captions == {}
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(ValueError):
        load_dataset(tmp_path)


def test_data_config_defaults():
    c = DataConfig()
    assert (c.num_train_ids, c.num_eval_ids, c.imgs_per_id, c.cams) == (100, 50, 8, 4)
