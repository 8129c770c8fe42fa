"""Scalar RLWE cipher: parameters, keys, encryption and evaluation, frames."""

from frag.he.cipher import (
    Ciphertext,
    Plaintext,
    PublicKey,
    SecretKey,
    decode,
    decrypt,
    decrypt_many,
    encode,
    encrypt,
    encrypt_many,
    eval_add,
    eval_mul_cipher,
    eval_mul_plain,
    eval_neg,
    eval_sum,
    keygen,
    make_ct,
)
from frag.he.codec import (
    deserialize_ct,
    deserialize_pk,
    deserialize_sk,
    read_ct_frame,
    serialize_ct,
    serialize_pk,
    serialize_sk,
)
from frag.he.params import DEFAULT_MODULI, CipherParams, ring_context

__all__ = [
    "CipherParams", "DEFAULT_MODULI", "ring_context",
    "Ciphertext", "Plaintext", "PublicKey", "SecretKey",
    "keygen", "encode", "decode", "encrypt", "encrypt_many", "decrypt", "decrypt_many",
    "eval_add", "eval_sum", "eval_neg", "eval_mul_cipher", "eval_mul_plain", "make_ct",
    "serialize_ct", "deserialize_ct", "read_ct_frame",
    "serialize_pk", "deserialize_pk", "serialize_sk", "deserialize_sk",
]
