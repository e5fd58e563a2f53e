import warnings

import numpy as np
import pytest

from umcl.prompt import (
    MAX_LENGTH,
    PAD_ID,
    PromptBuilder,
    PromptConfigError,
    TemplateRegistry,
    Vocabulary,
    assemble_prompt,
    builtin_registry,
    class_prompt_set,
    split_words,
    tokenize,
)


def one_class_registry(name="cardiomegaly", templates=None):
    templates = templates or ("one two three four five six seven eight nine ten",)
    return TemplateRegistry((name,), (tuple(templates),))


class TestTokenize:
    vocab = Vocabulary()

    def test_three_words(self):
        seq = tokenize("Cardiomegaly is present", self.vocab)
        assert seq.ids.shape == (MAX_LENGTH,)
        assert seq.n_tokens == 3
        assert seq.pad_mask.sum() == 74
        assert (seq.ids[seq.pad_mask] == PAD_ID).all()

    def test_deterministic(self):
        a = tokenize("Mild pleural effusion, left base.", self.vocab)
        b = tokenize("Mild pleural effusion, left base.", self.vocab)
        assert np.array_equal(a.ids, b.ids) and np.array_equal(a.pad_mask, b.pad_mask)

    def test_truncates_long_text(self):
        seq = tokenize(" ".join(f"word{i}" for i in range(100)), self.vocab)
        assert len(seq.ids) == 77
        assert not seq.pad_mask.any()

    def test_empty_is_all_pad(self):
        seq = tokenize("", self.vocab)
        assert seq.pad_mask.all() and seq.n_tokens == 0

    def test_case_and_punctuation(self):
        assert split_words("Edema; NO  effusion!") == ["edema", "no", "effusion"]
        a = tokenize("Edema; NO effusion!", self.vocab).ids
        b = tokenize("edema no effusion", self.vocab).ids
        assert np.array_equal(a, b)

    def test_ids_in_range(self):
        v = Vocabulary(size=11, seed=3)
        seq = tokenize(" ".join(f"t{i}" for i in range(60)), v)
        real = seq.ids[~seq.pad_mask]
        assert real.min() >= 2 and real.max() < 11

    def test_seed_changes_hash(self):
        assert Vocabulary(seed=0).token_id("effusion") != Vocabulary(seed=1).token_id("effusion")


class TestRegistry:
    def test_builtin_covers_every_class(self):
        reg = builtin_registry()
        assert reg.num_classes == 14
        assert all(len(ts) >= 1 for ts in reg.templates)
        for name, ts in zip(reg.class_names, reg.templates):
            assert all(name in t for t in ts)
            assert not any("{class}" in t for t in ts)

    def test_parse_round_trip(self):
        reg = builtin_registry(3)
        again = TemplateRegistry.parse(reg.to_text(), reg.class_names)
        assert again == reg

    def test_bad_lines(self):
        with pytest.raises(ValueError, match="line 1"):
            TemplateRegistry.parse("no tab here", ["a"])
        with pytest.raises(ValueError, match="out of range"):
            TemplateRegistry.parse("3\t{class} seen", ["a"])

    def test_class_without_template(self):
        with pytest.raises(ValueError, match="no template"):
            TemplateRegistry.parse("0\t{class} seen", ["a", "b"])


class TestAssemblePrompt:
    def setup_method(self):
        self.vocab = Vocabulary(size=97)
        self.table = np.random.default_rng(0).normal(size=(97, 6))

    def test_length_and_bank_positions(self):
        builder = PromptBuilder(one_class_registry(), self.vocab, 32)
        bank = np.random.default_rng(1).normal(size=(32, 6))
        seq = assemble_prompt(0, bank, builder, 0, self.table)
        assert len(seq) == 43
        assert np.array_equal(seq.bank_positions, np.arange(32))
        assert np.array_equal(seq.vectors[:32], bank)
        assert (seq.token_ids[:32] == -1).all() and (seq.token_ids[32:] >= 2).all()

    def test_order_is_bank_class_template(self):
        builder = PromptBuilder(one_class_registry(), self.vocab, 2)
        seq = assemble_prompt(0, np.zeros((2, 6)), builder, 0, self.table)
        expected = [self.vocab.token_id("cardiomegaly")] + [
            self.vocab.token_id(w) for w in "one two three four five six seven eight nine ten".split()
        ]
        assert seq.token_ids[2:].tolist() == expected
        np.testing.assert_array_equal(seq.vectors[2:], self.table[expected])

    def test_no_context_is_discrete_prompt(self):
        builder = PromptBuilder(one_class_registry(), self.vocab, 0)
        seq = assemble_prompt(0, np.zeros((0, 6)), builder, 0, self.table)
        assert seq.n_context == 0 and len(seq) == 11
        assert (seq.token_ids >= 2).all()

    def test_full_context_warns_and_truncates(self):
        with pytest.warns(UserWarning, match="no template slots"):
            builder = PromptBuilder(one_class_registry(), self.vocab, 76)
        seq = assemble_prompt(0, np.zeros((76, 6)), builder, 0, self.table)
        assert len(seq) == 77

    def test_context_at_limit_is_config_error(self):
        with pytest.raises(PromptConfigError):
            PromptBuilder(one_class_registry(), self.vocab, 77)

    def test_roomy_context_does_not_warn(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            PromptBuilder(one_class_registry(), self.vocab, 32)

    def test_index_errors(self):
        builder = PromptBuilder(one_class_registry(), self.vocab, 2)
        with pytest.raises(IndexError):
            assemble_prompt(1, np.zeros((2, 6)), builder, 0, self.table)
        with pytest.raises(IndexError):
            assemble_prompt(0, np.zeros((2, 6)), builder, 1, self.table)

    def test_bank_shape_checked(self):
        builder = PromptBuilder(one_class_registry(), self.vocab, 2)
        with pytest.raises(PromptConfigError):
            assemble_prompt(0, np.zeros((3, 6)), builder, 0, self.table)


class TestClassPromptSet:
    vocab = Vocabulary(size=97)
    table = np.random.default_rng(0).normal(size=(97, 4))

    def test_one_per_template(self):
        reg = builtin_registry(2)
        builder = PromptBuilder(reg, self.vocab, 3)
        prompts = class_prompt_set(1, np.ones((3, 4)), builder, self.table)
        assert len(prompts) == len(reg.templates[1]) == 5

    def test_single_template(self):
        builder = PromptBuilder(one_class_registry(templates=("seen",)), self.vocab, 3)
        assert len(class_prompt_set(0, np.ones((3, 4)), builder, self.table)) == 1

    def test_identical_templates_give_identical_prompts(self):
        reg = one_class_registry(templates=("same words",) * 3)
        builder = PromptBuilder(reg, self.vocab, 3)
        a, b, c = class_prompt_set(0, np.ones((3, 4)), builder, self.table)
        assert np.array_equal(a.vectors, b.vectors) and np.array_equal(b.vectors, c.vectors)


class TestLabelTail:
    def test_multi_hot_concatenates_in_class_order(self):
        reg = TemplateRegistry.parse("0\t{class} seen\n1\t{class} noted\n", ["edema", "fracture"])
        v = Vocabulary(size=97)
        builder = PromptBuilder(reg, v, 2)
        tail = builder.label_tail(np.array([1, 1]))
        want = [v.token_id(w) for w in "edema edema seen fracture fracture noted".split()]
        assert tail == want

    def test_padding_width(self):
        builder = PromptBuilder(builtin_registry(4), Vocabulary(), 32)
        rows = builder.pad([builder.label_tail(np.array([1, 0, 0, 1]))])
        assert rows.shape == (1, 45)
