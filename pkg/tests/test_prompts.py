import numpy as np
import pytest
import torch
from torch.func import functional_call

from promptkpt.prompts import (ClassPrompt, PromptError, PromptFeatures, TextEncoder, TextPrompt, VisualPrompt,
                               VisualPromptEncoder, Vocabulary, crop_exemplar, encode_text, encode_visual,
                               render_template, tokenize)

PERSON = ["nose", "left eye", "right eye", "left ear", "right ear", "left shoulder", "right shoulder",
          "left elbow", "right elbow", "left wrist", "right wrist", "left hip", "right hip", "left knee",
          "right knee", "left ankle", "right ankle"]
CAT = ["left eye", "right eye", "nose", "neck", "tail", "left paw", "right paw", "left ear", "right ear"]


def make_text_encoder(dim=32, **kw):
    torch.manual_seed(0)
    texts = [render_template("", w) for w in PERSON + CAT + ["person", "cat", "dog"]]
    return TextEncoder(Vocabulary.from_texts(texts), dim, layers=2, heads=4, **kw)


def test_render_template_examples():
    assert render_template("oil painting", "person") == "An oil painting photo of a person"
    assert render_template("natural", "cat", keypoint="left eye") == "An natural photo of a left eye of the cat"
    assert render_template("", "dog") == "A photo of a dog"
    assert render_template("", "cat", part="head", keypoint="left eye") == "A photo of a left eye of the head cat"
    with pytest.raises(PromptError):
        render_template("x", "")


def test_tokenize_lowercases_and_splits():
    assert tokenize("An Oil-painting photo") == ["an", "oil", "painting", "photo"]


def test_unknown_tokens_map_to_unk():
    vocab = Vocabulary(["cat"])
    ids = vocab.encode("zebra cat")
    assert ids[0] == vocab.stoi["<unk>"]
    assert ids[-1] == vocab.stoi["<eos>"]


def test_vocabulary_file_round_trip(tmp_path):
    vocab = Vocabulary(["b", "a", "left"])
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").itos == vocab.itos


def test_encode_text_shapes():
    enc = make_text_encoder(256)
    pf = encode_text(enc, TextPrompt("", [ClassPrompt("person", PERSON), ClassPrompt("cat", CAT)]))
    assert pf.obj.shape == (2, 256)
    assert pf.kpt.shape == (26, 256)
    assert pf.slices == [(0, 17), (17, 26)]


def test_encode_text_shared_name_identical_rows():
    enc = make_text_encoder().eval()
    pf = enc(TextPrompt("", [ClassPrompt("person", PERSON), ClassPrompt("cat", CAT)]))
    i, j = PERSON.index("left eye"), 17 + CAT.index("left eye")
    assert torch.equal(pf.kpt[i], pf.kpt[j])
    assert not torch.equal(pf.kpt[i], pf.kpt[PERSON.index("right eye")])


def test_encode_text_deterministic_and_batch_independent():
    enc = make_text_encoder().eval()
    a = enc.encode_strings(["A photo of a cat", "A photo of a nose"])
    b = enc.encode_strings(["A photo of a nose", "A photo of a dog", "A photo of a cat"])
    assert torch.allclose(a[0], b[2], atol=1e-6)
    assert torch.allclose(a[1], b[0], atol=1e-6)
    assert torch.equal(enc.encode_strings(["A photo of a cat"]), enc.encode_strings(["A photo of a cat"]))


def test_encode_text_class_permutation_equivariance():
    enc = make_text_encoder().eval()
    a = enc(TextPrompt("", [ClassPrompt("person", PERSON), ClassPrompt("cat", CAT)]))
    b = enc(TextPrompt("", [ClassPrompt("cat", CAT), ClassPrompt("person", PERSON)]))
    assert torch.allclose(a.obj[[1, 0]], b.obj, atol=1e-6)
    assert b.slices == [(0, 9), (9, 26)]
    assert torch.allclose(a.kpt[17:], b.kpt[:9], atol=1e-6)
    assert torch.allclose(a.kpt[:17], b.kpt[9:], atol=1e-6)


def test_object_context_rendering():
    enc = make_text_encoder(keypoint_context="object")
    objs, kpts = enc.render(TextPrompt("", [ClassPrompt("cat", ["nose"])]))
    assert objs == ["A photo of a cat"]
    assert kpts == ["A photo of a nose of the cat"]
    with pytest.raises(ValueError):
        make_text_encoder(keypoint_context="bogus")


def test_prompt_validation():
    with pytest.raises(PromptError):
        ClassPrompt("cat", ["nose", "nose"])
    with pytest.raises(PromptError):
        TextPrompt("", [ClassPrompt("cat", ["nose"]), ClassPrompt("cat", ["tail"])])
    with pytest.raises(PromptError):
        make_text_encoder()(TextPrompt("", []))
    with pytest.raises(PromptError):
        VisualPrompt(torch.zeros(3, 32, 32), np.array([[1.5, 0.5, 1.0]]), ["nose"], "cat")
    VisualPrompt(torch.zeros(3, 32, 32), np.array([[1.5, 0.5, 0.0]]), ["nose"], "cat")


def test_text_prompt_parse():
    p = TextPrompt.parse("person: left eye, right eye; cat: nose")
    assert [c.name for c in p.classes] == ["person", "cat"]
    assert p.classes[0].keypoints == ["left eye", "right eye"]
    with pytest.raises(PromptError):
        TextPrompt.parse("person left eye")


def make_visual_encoder(dim=32, res=32, patch=16, layers=2):
    torch.manual_seed(0)
    return VisualPromptEncoder(dim, layers, 4, patch, res)


def random_prompt(rng, k, res=32, vis=None):
    kp = np.column_stack([rng.uniform(0, 1, (k, 2)), (rng.uniform(size=k) < 0.7) if vis is None else vis])
    return VisualPrompt(torch.rand(3, res, res), kp.astype(np.float64), [f"k{i}" for i in range(k)], "thing")


def test_encode_visual_shapes():
    enc = make_visual_encoder(256, 224, 16, layers=1)
    pf = encode_visual(enc, random_prompt(np.random.default_rng(0), 12, 224))
    assert pf.kpt.shape == (12, 256)
    assert pf.obj.shape == (1, 256)
    assert pf.slices == [(0, 12)]


def test_encode_visual_rejects_wrong_resolution():
    enc = make_visual_encoder()
    with pytest.raises(PromptError):
        enc(VisualPrompt(torch.zeros(3, 48, 48), np.zeros((1, 3)), ["a"], "x"))


def test_all_invisible_tokens_equal_mask_token():
    enc = make_visual_encoder()
    kp = np.column_stack([np.random.default_rng(0).uniform(0, 1, (12, 2)), np.zeros(12)])
    tokens = enc.initial_tokens(kp)
    assert torch.equal(tokens, enc.mask_token.expand(12, -1))


def test_visibility_dichotomy_is_total():
    enc = make_visual_encoder()
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = random_prompt(rng, 6)
        tokens = enc.initial_tokens(p.keypoints)
        vis = p.keypoints[:, 2] > 0
        is_mask = (tokens == enc.mask_token).all(-1).numpy()
        assert np.array_equal(is_mask, ~vis)


def test_invisible_coordinates_never_read():
    enc = make_visual_encoder().eval()
    p = random_prompt(np.random.default_rng(2), 5, vis=np.array([1, 0, 1, 0, 1.0]))
    q = VisualPrompt(p.image, p.keypoints.copy(), p.keypoint_names, p.object_name)
    q.keypoints[1, :2] = [123.0, -7.0]
    q.keypoints[3, :2] = [0.9, 0.1]
    a, b = enc(p), enc(q)
    assert torch.equal(a.kpt, b.kpt) and torch.equal(a.obj, b.obj)


def test_encoders_finite_on_many_random_inputs():
    venc = make_visual_encoder(16, 32, 16, layers=1).eval()
    rng = np.random.default_rng(3)
    with torch.no_grad():
        for _ in range(1000):
            pf = venc(random_prompt(rng, int(rng.integers(1, 6))))
            assert torch.isfinite(pf.kpt).all() and torch.isfinite(pf.obj).all()
        tenc = make_text_encoder(16).eval()
        words = tenc.vocab.itos + ["unseen", "words"]
        texts = [" ".join(rng.choice(words, size=int(rng.integers(1, 8)))) for _ in range(1000)]
        assert torch.isfinite(tenc.encode_strings(texts)).all()


def test_visual_encoder_gradcheck_four_keypoints():
    enc = make_visual_encoder(8, 16, 8, layers=1).double()
    kp = np.array([[0.2, 0.3, 1], [0.7, 0.4, 0], [0.5, 0.9, 1], [0.1, 0.6, 1.0]])
    image = torch.rand(3, 16, 16, dtype=torch.float64, requires_grad=True)

    def run(img):
        pf = enc(VisualPrompt(img, kp, ["a", "b", "c", "d"], "x"))
        return pf.kpt, pf.obj

    assert torch.autograd.gradcheck(run, (image,), eps=1e-5, atol=1e-7, rtol=1e-4)


def test_text_encoder_gradcheck():
    enc = make_text_encoder(8).double()
    prompt = TextPrompt("", [ClassPrompt("cat", ["nose", "left eye"])])
    weight = enc.token_embed.weight.detach().clone().requires_grad_()

    def run(w):
        pf = functional_call(enc, {"token_embed.weight": w}, (prompt,))
        return pf.obj, pf.kpt

    assert torch.autograd.gradcheck(run, (weight,), eps=1e-5, atol=1e-7, rtol=1e-4)


def test_prompt_features_validation_and_concat():
    with pytest.raises(PromptError):
        PromptFeatures(torch.zeros(2, 4), torch.zeros(3, 4), [(0, 3)], ["a", "b"], [["x"], ["y"]])
    with pytest.raises(PromptError):
        PromptFeatures(torch.zeros(1, 4), torch.zeros(3, 4), [(0, 2)], ["a"], [["x", "y"]])
    a = PromptFeatures(torch.zeros(1, 4), torch.zeros(2, 4), [(0, 2)], ["a"], [["x", "y"]])
    b = PromptFeatures(torch.ones(1, 4), torch.ones(3, 4), [(0, 3)], ["b"], [["x", "z", "w"]])
    c = PromptFeatures.concat([a, b])
    assert c.slices == [(0, 2), (2, 5)]
    assert c.class_of_row().tolist() == [0, 0, 1, 1, 1]


def test_crop_exemplar_square_with_margin():
    image = torch.zeros(3, 40, 40)
    image[:, 10:20, 10:30] = 1.0
    box = (0.5, 0.375, 0.5, 0.25)  # 20 x 10 px centred at (20, 15)
    kp = np.array([[0.5, 0.375, 1.0], [0.0, 0.0, 1.0]])
    crop, out = crop_exemplar(image, box, kp, 24)
    assert crop.shape == (3, 24, 24)
    assert out[0, :2] == pytest.approx([0.5, 0.5])
    assert out[1, 2] == 0.0  # outside the crop
    side = 20 * 1.2
    assert out[0, 0] * side == pytest.approx(20 - (20 - side / 2))
