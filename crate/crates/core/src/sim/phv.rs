use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::program::{FieldDecl, FieldKind};

/// Packet header vector: one integer per declared field.
///
/// Header fields survive recirculation; metadata fields are zeroed at the
/// start of every pass. Every write is range checked against the field's
/// declared width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phv {
    decls: Vec<FieldDecl>,
    bounds: Vec<(i64, i64)>,
    index: HashMap<String, usize>,
    values: Vec<i64>,
}

impl Phv {
    pub fn new(decls: &[FieldDecl]) -> Result<Self> {
        let mut index = HashMap::with_capacity(decls.len());
        for (i, d) in decls.iter().enumerate() {
            if d.width == 0 || d.width > 62 {
                return Err(Error::Program(format!("field {} has unsupported width {}", d.name, d.width)));
            }
            if index.insert(d.name.clone(), i).is_some() {
                return Err(Error::Program(format!("field {} declared twice", d.name)));
            }
        }
        Ok(Self {
            bounds: decls.iter().map(FieldDecl::bounds).collect(),
            decls: decls.to_vec(),
            index,
            values: vec![0; decls.len()],
        })
    }

    pub fn decls(&self) -> &[FieldDecl] {
        &self.decls
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<i64> {
        self.index_of(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, v: i64) -> Result<()> {
        let i = self.index_of(name).ok_or_else(|| Error::Program(format!("undeclared field {name}")))?;
        self.write(i, v)
    }

    pub(crate) fn read(&self, i: usize) -> i64 {
        self.values[i]
    }

    pub(crate) fn write(&mut self, i: usize, v: i64) -> Result<()> {
        let (lo, hi) = self.bounds[i];
        if v < lo || v > hi {
            let d = &self.decls[i];
            return Err(Error::FieldOverflow { field: d.name.clone(), value: v, width: d.width });
        }
        self.values[i] = v;
        Ok(())
    }

    /// Zero every metadata field.
    pub fn reset_metadata(&mut self) {
        for (v, d) in self.values.iter_mut().zip(&self.decls) {
            if d.kind == FieldKind::Metadata {
                *v = 0;
            }
        }
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    /// Header field values only, in declaration order.
    pub fn header(&self) -> Vec<(String, i64)> {
        self.decls
            .iter()
            .zip(&self.values)
            .filter(|(d, _)| d.kind == FieldKind::Header)
            .map(|(d, &v)| (d.name.clone(), v))
            .collect()
    }
}
