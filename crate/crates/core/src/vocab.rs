//! Token id layout of the synthetic world.
//!
//! ```text
//! 0            end of answer
//! 1, 2         yes, no
//! 3            "is"
//! 4            disturbance token (instruction corruption)
//! 5 ..         system prompt tokens
//! then         one text id per object
//! then         one visual id per object (reserved contiguous range)
//! ```

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const END_OF_ANSWER: TokenId = 0;
pub const YES: TokenId = 1;
pub const NO: TokenId = 2;
pub const QUESTION: TokenId = 3;
pub const DISTURBANCE: TokenId = 4;
const FIRST_SYSTEM: TokenId = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_objects: usize,
    pub n_system: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            n_objects: 12,
            n_system: 3,
        }
    }
}

impl Vocab {
    pub fn new(n_objects: usize, n_system: usize) -> Self {
        Self { n_objects, n_system }
    }

    pub fn size(&self) -> usize {
        FIRST_SYSTEM + self.n_system + 2 * self.n_objects
    }

    /// The fixed system prompt.
    pub fn system_prompt(&self) -> Vec<TokenId> {
        (FIRST_SYSTEM..FIRST_SYSTEM + self.n_system).collect()
    }

    pub fn text_id(&self, object: usize) -> TokenId {
        FIRST_SYSTEM + self.n_system + object
    }

    pub fn visual_id(&self, object: usize) -> TokenId {
        FIRST_SYSTEM + self.n_system + self.n_objects + object
    }

    pub fn object_of_text(&self, id: TokenId) -> Option<usize> {
        let base = FIRST_SYSTEM + self.n_system;
        (base..base + self.n_objects).contains(&id).then(|| id - base)
    }

    pub fn object_of_visual(&self, id: TokenId) -> Option<usize> {
        let base = FIRST_SYSTEM + self.n_system + self.n_objects;
        (base..base + self.n_objects).contains(&id).then(|| id - base)
    }

    /// Instruction tokens asking whether `object` is present; the answer is
    /// predicted right after the object token.
    pub fn question(&self, object: usize) -> Vec<TokenId> {
        vec![QUESTION, self.text_id(object)]
    }
}
