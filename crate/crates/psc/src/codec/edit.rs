//! Edit scripts describing how a provisional token sequence becomes the
//! realized one. Scripts are the unit a patch carries: the structural
//! skeleton travels verbatim while inserted and replacement tokens go
//! through the arithmetic coder.

use crate::predictor::Token;

use super::CodecError;

/// One edit operation. Replacement spans may change length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOp {
    /// Copy the next `n` tokens unchanged.
    Keep(usize),
    /// Drop the next `old` tokens and emit `tokens` instead.
    Replace { old: usize, tokens: Vec<Token> },
    /// Emit `tokens` without consuming input.
    Insert(Vec<Token>),
    /// Drop the next `n` tokens.
    Delete(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    pub fn new(ops: Vec<EditOp>) -> Self {
        Self { ops }
    }

    /// Input tokens the script consumes.
    pub fn source_len(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                EditOp::Keep(n) | EditOp::Delete(n) => *n,
                EditOp::Replace { old, .. } => *old,
                EditOp::Insert(_) => 0,
            })
            .sum()
    }

    /// Output tokens the script produces.
    pub fn target_len(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                EditOp::Keep(n) => *n,
                EditOp::Delete(_) => 0,
                EditOp::Replace { tokens, .. } | EditOp::Insert(tokens) => tokens.len(),
            })
            .sum()
    }

    /// Tokens not copied from the input, in emission order. These are the
    /// ones a payload codes.
    pub fn new_tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                EditOp::Replace { tokens, .. } | EditOp::Insert(tokens) => {
                    out.extend_from_slice(tokens)
                }
                EditOp::Keep(_) | EditOp::Delete(_) => {}
            }
        }
        out
    }
}

/// Canonical three-part script: longest common prefix kept, a single
/// middle operation, longest common suffix of the remainder kept.
pub fn diff(provisional: &[Token], realized: &[Token]) -> EditScript {
    let lcp = provisional
        .iter()
        .zip(realized.iter())
        .take_while(|(a, b)| a == b)
        .count();
    let old_rest = &provisional[lcp..];
    let new_rest = &realized[lcp..];
    let lcs = old_rest
        .iter()
        .rev()
        .zip(new_rest.iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let old_mid = old_rest.len() - lcs;
    let new_mid = &new_rest[..new_rest.len() - lcs];

    let mut ops = Vec::new();
    if lcp > 0 {
        ops.push(EditOp::Keep(lcp));
    }
    match (old_mid, new_mid.is_empty()) {
        (0, true) => {}
        (0, false) => ops.push(EditOp::Insert(new_mid.to_vec())),
        (_, true) => ops.push(EditOp::Delete(old_mid)),
        (_, false) => ops.push(EditOp::Replace {
            old: old_mid,
            tokens: new_mid.to_vec(),
        }),
    }
    if lcs > 0 {
        ops.push(EditOp::Keep(lcs));
    }
    EditScript::new(ops)
}

/// Applies a script strictly: every consuming op must fit and the input
/// must be consumed exactly.
pub fn apply(provisional: &[Token], script: &EditScript) -> Result<Vec<Token>, CodecError> {
    let mut out = Vec::with_capacity(script.target_len());
    let mut cursor = 0usize;
    for (i, op) in script.ops.iter().enumerate() {
        let need = match op {
            EditOp::Keep(n) | EditOp::Delete(n) => *n,
            EditOp::Replace { old, .. } => *old,
            EditOp::Insert(_) => 0,
        };
        if cursor + need > provisional.len() {
            return Err(CodecError::MalformedScript(format!(
                "op {i} consumes past end of input ({} + {need} > {})",
                cursor,
                provisional.len()
            )));
        }
        match op {
            EditOp::Keep(n) => {
                out.extend_from_slice(&provisional[cursor..cursor + n]);
                cursor += n;
            }
            EditOp::Delete(n) => cursor += n,
            EditOp::Replace { old, tokens } => {
                cursor += old;
                out.extend_from_slice(tokens);
            }
            EditOp::Insert(tokens) => out.extend_from_slice(tokens),
        }
    }
    if cursor != provisional.len() {
        return Err(CodecError::MalformedScript(format!(
            "script consumed {cursor} of {} input tokens",
            provisional.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_sequences_yield_single_keep() {
        let s = vec![4u32, 2, 7, 7];
        let script = diff(&s, &s);
        assert_eq!(script.ops, vec![EditOp::Keep(4)]);
        assert_eq!(apply(&s, &script).unwrap(), s);
    }

    #[test]
    fn empty_to_empty_is_empty_script() {
        let script = diff(&[], &[]);
        assert!(script.ops.is_empty());
        assert_eq!(apply(&[], &script).unwrap(), Vec::<Token>::new());
    }

    #[test]
    fn middle_replace_of_different_length() {
        let old = vec![1u32, 2, 3, 4, 5];
        let new = vec![1u32, 2, 9, 9, 9, 9, 5];
        let script = diff(&old, &new);
        assert_eq!(
            script.ops,
            vec![
                EditOp::Keep(2),
                EditOp::Replace {
                    old: 2,
                    tokens: vec![9, 9, 9, 9]
                },
                EditOp::Keep(1),
            ]
        );
        assert_eq!(apply(&old, &script).unwrap(), new);
        assert_eq!(script.new_tokens(), vec![9, 9, 9, 9]);
    }

    #[test]
    fn pure_insert_and_pure_delete() {
        let old = vec![1u32, 2];
        let grown = vec![1u32, 7, 7, 2];
        let script = diff(&old, &grown);
        assert_eq!(
            script.ops,
            vec![EditOp::Keep(1), EditOp::Insert(vec![7, 7]), EditOp::Keep(1)]
        );
        assert_eq!(apply(&old, &script).unwrap(), grown);

        let shrunk = diff(&grown, &old);
        assert_eq!(
            shrunk.ops,
            vec![EditOp::Keep(1), EditOp::Delete(2), EditOp::Keep(1)]
        );
        assert_eq!(apply(&grown, &shrunk).unwrap(), old);
    }

    #[test]
    fn suffix_rewrite_shape() {
        // The protocol's usual patch: keep a prefix, replace the tail.
        let old = vec![5u32, 5, 5, 1, 2];
        let new = vec![5u32, 5, 5, 8, 9, 10];
        let script = diff(&old, &new);
        assert_eq!(
            script.ops,
            vec![
                EditOp::Keep(3),
                EditOp::Replace {
                    old: 2,
                    tokens: vec![8, 9, 10]
                }
            ]
        );
    }

    #[test]
    fn apply_rejects_overrun_and_underrun() {
        let input = vec![1u32, 2, 3];
        let over = EditScript::new(vec![EditOp::Keep(4)]);
        assert!(matches!(
            apply(&input, &over),
            Err(CodecError::MalformedScript(_))
        ));
        let under = EditScript::new(vec![EditOp::Keep(2)]);
        assert!(matches!(
            apply(&input, &under),
            Err(CodecError::MalformedScript(_))
        ));
    }

    #[test]
    fn length_accounting() {
        let script = EditScript::new(vec![
            EditOp::Keep(2),
            EditOp::Delete(1),
            EditOp::Insert(vec![8]),
            EditOp::Replace {
                old: 3,
                tokens: vec![1, 2],
            },
        ]);
        assert_eq!(script.source_len(), 6);
        assert_eq!(script.target_len(), 5);
        assert_eq!(script.new_tokens(), vec![8, 1, 2]);
    }

    proptest! {
        #[test]
        fn apply_inverts_diff(
            old in proptest::collection::vec(0u32..6, 0..40),
            new in proptest::collection::vec(0u32..6, 0..40),
        ) {
            let script = diff(&old, &new);
            prop_assert_eq!(script.source_len(), old.len());
            prop_assert_eq!(script.target_len(), new.len());
            prop_assert_eq!(apply(&old, &script).unwrap(), new);
            // Canonical shape: at most three ops, middle op not a Keep.
            prop_assert!(script.ops.len() <= 3);
        }
    }
}
