"""Reserved token ids, symbols, codec limits and desk-scale defaults."""

# Reserved vocabulary entries shared by every task
PAD = 0
BOS = 1
EOS = 2
MASK = 3
UNK = 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<mask>", "<unk>")

# Word-initial marker that makes decode exact
WORD_MARKER = "▁"
# Word-level stand-in for a masked word before subword encoding
MASK_WORD = SPECIAL_TOKENS[MASK]

# Codec limits: refuse to allocate from malformed files
MAX_TENSOR_ELEMENTS = 50_000_000
MAX_TENSOR_RANK = 8
MAX_RECORDS = 100_000
MAX_STRING_BYTES = 10_000_000
MAX_SEQUENCE_LENGTH = 10_000_000
MAX_NESTING_DEPTH = 32

# Desk-scale defaults
BASE_FEATURE_DIM = 64
STACK_FRAMES = 3
STACK_STRIDE = 3
DEFAULT_VOCAB_SIZE = 400
