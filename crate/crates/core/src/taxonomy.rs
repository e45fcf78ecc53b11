//! Class taxonomy: a forest of containment edges plus declared exclusions,
//! compiled into a dense pairwise relation matrix.
//!
//! The tree file is line oriented:
//!
//! ```text
//! class <Name>
//! contains <Parent> <Child>
//! exclusive <A> <B>
//! exclusive_children <Parent>
//! ```
//!
//! `#` starts a comment. The order of `class` lines fixes the class indices.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default fifteen-class kidney taxonomy.
pub const KIDNEY_TREE: &str = include_str!("../data/kidney.tree");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("unknown class `{name}` referenced on line {line}")]
    UnknownClass { name: String, line: usize },
    #[error("class `{child}` has two parents (`{first}` and `{second}`)")]
    MultipleParents {
        child: String,
        first: String,
        second: String,
    },
    #[error("containment cycle through `{0}`")]
    Cycle(String),
    #[error("`{0}` and `{1}` are declared exclusive but one contains the other")]
    ContainedExclusion(String, String),
    #[error("derived contradiction: `{0}` and `{1}` are both contained and exclusive")]
    Contradiction(String, String),
    #[error("class index {index} out of range for {n} classes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("taxonomy has no classes")]
    Empty,
    #[error("no class named `{0}`")]
    NoSuchClass(String),
}

/// Index of a class in its taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Relation of an ordered class pair `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    /// `i ⊆ j`
    Subset,
    /// `i ⊇ j`
    Superset,
    /// `i ∩ j = ∅`
    Exclusive,
    /// `i == j`
    Identity,
    Unrelated,
}

impl Relation {
    /// Cell code used in relation CSV files.
    pub fn code(self) -> &'static str {
        match self {
            Relation::Subset => "SUB",
            Relation::Superset => "SUP",
            Relation::Exclusive => "EXC",
            Relation::Identity => "SELF",
            Relation::Unrelated => "NONE",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "SUB" => Relation::Subset,
            "SUP" => Relation::Superset,
            "EXC" => Relation::Exclusive,
            "SELF" => Relation::Identity,
            "NONE" => Relation::Unrelated,
            _ => return None,
        })
    }

    /// Relation of the reversed pair.
    pub fn converse(self) -> Self {
        match self {
            Relation::Subset => Relation::Superset,
            Relation::Superset => Relation::Subset,
            other => other,
        }
    }

    /// Whether the taxonomy loss can be nonzero for this relation.
    pub fn is_constraining(self) -> bool {
        matches!(
            self,
            Relation::Subset | Relation::Superset | Relation::Exclusive
        )
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A validated containment forest with exclusion declarations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    names: Vec<String>,
    /// `(parent, child)` in declaration order.
    edges: Vec<(usize, usize)>,
    exclusions: Vec<(usize, usize)>,
    exclusive_children: Vec<usize>,
}

impl TaxonomyTree {
    /// Builds a tree from indices, running the same validation as [`parse_tree`].
    pub fn new(
        names: Vec<String>,
        edges: Vec<(usize, usize)>,
        exclusions: Vec<(usize, usize)>,
        exclusive_children: Vec<usize>,
    ) -> Result<Self, TaxonomyError> {
        let tree = TaxonomyTree {
            names,
            edges,
            exclusions,
            exclusive_children,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.names[id.0]
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(ClassId)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn exclusions(&self) -> &[(usize, usize)] {
        &self.exclusions
    }

    pub fn exclusive_children(&self) -> &[usize] {
        &self.exclusive_children
    }

    /// Parent of each class, `None` for roots.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.names.len()];
        for &(p, c) in &self.edges {
            parent[c] = Some(p);
        }
        parent
    }

    pub fn children(&self, parent: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(p, _)| p == parent)
            .map(|&(_, c)| c)
            .collect()
    }

    /// Depth of each class (roots are 0).
    pub fn depths(&self) -> Vec<usize> {
        let parent = self.parents();
        (0..self.names.len())
            .map(|mut i| {
                let mut d = 0;
                while let Some(p) = parent[i] {
                    d += 1;
                    i = p;
                }
                d
            })
            .collect()
    }

    /// Serializes back into the tree file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.names {
            out.push_str(&format!("class {n}\n"));
        }
        for &(p, c) in &self.edges {
            out.push_str(&format!("contains {} {}\n", self.names[p], self.names[c]));
        }
        for &(a, b) in &self.exclusions {
            out.push_str(&format!("exclusive {} {}\n", self.names[a], self.names[b]));
        }
        for &p in &self.exclusive_children {
            out.push_str(&format!("exclusive_children {}\n", self.names[p]));
        }
        out
    }

    fn validate(&self) -> Result<(), TaxonomyError> {
        let n = self.names.len();
        if n == 0 {
            return Err(TaxonomyError::Empty);
        }
        let mut seen = HashMap::new();
        for (i, name) in self.names.iter().enumerate() {
            if seen.insert(name.as_str(), i).is_some() {
                return Err(TaxonomyError::DuplicateClass(name.clone()));
            }
        }
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(TaxonomyError::IndexOutOfRange { index: i, n })
            }
        };
        let mut parent: Vec<Option<usize>> = vec![None; n];
        for &(p, c) in &self.edges {
            check(p)?;
            check(c)?;
            if p == c {
                return Err(TaxonomyError::Cycle(self.names[p].clone()));
            }
            if let Some(first) = parent[c] {
                return Err(TaxonomyError::MultipleParents {
                    child: self.names[c].clone(),
                    first: self.names[first].clone(),
                    second: self.names[p].clone(),
                });
            }
            parent[c] = Some(p);
        }
        // With at most one parent per node, a cycle shows up as a parent walk
        // longer than n.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                steps += 1;
                if steps > n {
                    return Err(TaxonomyError::Cycle(self.names[start].clone()));
                }
                cur = p;
            }
        }
        let is_ancestor = |anc: usize, mut node: usize| {
            while let Some(p) = parent[node] {
                if p == anc {
                    return true;
                }
                node = p;
            }
            false
        };
        for &(a, b) in &self.exclusions {
            check(a)?;
            check(b)?;
            if a == b || is_ancestor(a, b) || is_ancestor(b, a) {
                return Err(TaxonomyError::ContainedExclusion(
                    self.names[a].clone(),
                    self.names[b].clone(),
                ));
            }
        }
        for &p in &self.exclusive_children {
            check(p)?;
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

/// Parses a taxonomy tree file.
pub fn parse_tree(text: &str) -> Result<TaxonomyTree, TaxonomyError> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut exclusions = Vec::new();
    let mut exclusive_children = Vec::new();

    // Class lines may appear anywhere, so relations are resolved after the
    // first pass.
    let mut pending: Vec<(usize, &str, Vec<&str>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let words: Vec<&str> = strip_comment(raw).split_whitespace().collect();
        let Some((&directive, args)) = words.split_first() else {
            continue;
        };
        let want = |k: usize| {
            if args.len() == k {
                Ok(())
            } else {
                Err(TaxonomyError::Syntax {
                    line,
                    msg: format!("`{directive}` takes {k} argument(s), got {}", args.len()),
                })
            }
        };
        match directive {
            "class" => {
                want(1)?;
                let name = args[0].to_string();
                if index.contains_key(&name) {
                    return Err(TaxonomyError::DuplicateClass(name));
                }
                index.insert(name.clone(), names.len());
                names.push(name);
            }
            "contains" | "exclusive" => {
                want(2)?;
                pending.push((line, directive, args.to_vec()));
            }
            "exclusive_children" => {
                want(1)?;
                pending.push((line, directive, args.to_vec()));
            }
            other => {
                return Err(TaxonomyError::Syntax {
                    line,
                    msg: format!("unknown directive `{other}`"),
                })
            }
        }
    }

    for (line, directive, args) in pending {
        let resolve = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| TaxonomyError::UnknownClass {
                    name: name.to_string(),
                    line,
                })
        };
        match directive {
            "contains" => edges.push((resolve(args[0])?, resolve(args[1])?)),
            "exclusive" => exclusions.push((resolve(args[0])?, resolve(args[1])?)),
            _ => exclusive_children.push(resolve(args[0])?),
        }
    }

    TaxonomyTree::new(names, edges, exclusions, exclusive_children)
}

/// Dense `n × n` relation table; `rel(i, j)` reads "class i is ... of class j".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyMatrix {
    names: Vec<String>,
    rel: Vec<Relation>,
}

impl TaxonomyMatrix {
    /// Wraps an arbitrary relation table without checking it. Use
    /// [`validate_matrix`] to audit the result.
    pub fn from_relations(names: Vec<String>, rel: Vec<Relation>) -> Self {
        assert_eq!(rel.len(), names.len() * names.len(), "relation table size");
        TaxonomyMatrix { names, rel }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(ClassId)
    }

    /// Unchecked lookup.
    pub fn get(&self, i: usize, j: usize) -> Relation {
        self.rel[i * self.names.len() + j]
    }

    fn set(&mut self, i: usize, j: usize, r: Relation) {
        let n = self.names.len();
        self.rel[i * n + j] = r;
    }

    /// Relation CSV: header and first column are class names.
    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut out = String::from("class");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.names[i]);
            for j in 0..n {
                out.push(',');
                out.push_str(self.get(i, j).code());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TaxonomyError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(TaxonomyError::Empty)?;
        let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let n = names.len();
        let mut rel = Vec::with_capacity(n * n);
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != n + 1 || row >= n || cells[0] != names[row] {
                return Err(TaxonomyError::Syntax {
                    line: row + 2,
                    msg: "malformed relation row".into(),
                });
            }
            for c in &cells[1..] {
                rel.push(Relation::from_code(c).ok_or_else(|| TaxonomyError::Syntax {
                    line: row + 2,
                    msg: format!("unknown relation code `{c}`"),
                })?);
            }
        }
        if rel.len() != n * n {
            return Err(TaxonomyError::Syntax {
                line: 0,
                msg: format!("expected {n} rows"),
            });
        }
        Ok(TaxonomyMatrix { names, rel })
    }
}

/// Compiles a tree into its full relation matrix.
///
/// Containment is closed transitively; every declared exclusion (and every
/// pair of distinct children under an `exclusive_children` parent) is pushed
/// down to all descendants of both sides.
pub fn derive_matrix(tree: &TaxonomyTree) -> Result<TaxonomyMatrix, TaxonomyError> {
    let n = tree.len();
    // below[c][a]: c is a (strict) descendant of a
    let mut below = vec![vec![false; n]; n];
    for &(p, c) in tree.edges() {
        below[c][p] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if below[i][k] {
                for j in 0..n {
                    if below[k][j] {
                        below[i][j] = true;
                    }
                }
            }
        }
    }

    let mut m = TaxonomyMatrix {
        names: tree.names().to_vec(),
        rel: vec![Relation::Unrelated; n * n],
    };
    for i in 0..n {
        m.set(i, i, Relation::Identity);
        for j in 0..n {
            if below[i][j] {
                m.set(i, j, Relation::Subset);
                m.set(j, i, Relation::Superset);
            }
        }
    }

    let mut seeds: Vec<(usize, usize)> = tree.exclusions().to_vec();
    for &p in tree.exclusive_children() {
        let kids = tree.children(p);
        for (x, &a) in kids.iter().enumerate() {
            for &b in &kids[x + 1..] {
                seeds.push((a, b));
            }
        }
    }
    let lineage = |root: usize| -> Vec<usize> {
        (0..n).filter(|&x| x == root || below[x][root]).collect()
    };
    for (a, b) in seeds {
        let la = lineage(a);
        let lb = lineage(b);
        for &x in &la {
            for &y in &lb {
                match m.get(x, y) {
                    Relation::Unrelated | Relation::Exclusive => {
                        m.set(x, y, Relation::Exclusive);
                        m.set(y, x, Relation::Exclusive);
                    }
                    _ => {
                        return Err(TaxonomyError::Contradiction(
                            tree.names()[x].clone(),
                            tree.names()[y].clone(),
                        ))
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Checked lookup of `rel(i, j)`.
pub fn relation_of(m: &TaxonomyMatrix, i: ClassId, j: ClassId) -> Result<Relation, TaxonomyError> {
    let n = m.len();
    for id in [i, j] {
        if id.0 >= n {
            return Err(TaxonomyError::IndexOutOfRange { index: id.0, n });
        }
    }
    Ok(m.get(i.0, j.0))
}

/// Audits a relation table. Returns one description per broken rule; an
/// empty list means the table is consistent.
pub fn validate_matrix(m: &TaxonomyMatrix) -> Vec<String> {
    let n = m.len();
    let name = |i: usize| m.names()[i].as_str();
    let mut out = Vec::new();

    for i in 0..n {
        if m.get(i, i) != Relation::Identity {
            out.push(format!("diagonal: rel({0},{0}) = {1}, expected SELF", name(i), m.get(i, i)));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if a == Relation::Identity || b == Relation::Identity {
                out.push(format!("off-diagonal SELF between {} and {}", name(i), name(j)));
            } else if b != a.converse() {
                out.push(format!(
                    "antisymmetry: rel({},{}) = {a} but rel({},{}) = {b}",
                    name(i),
                    name(j),
                    name(j),
                    name(i)
                ));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j || m.get(i, j) != Relation::Subset {
                continue;
            }
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                match m.get(j, k) {
                    Relation::Subset if m.get(i, k) != Relation::Subset => out.push(format!(
                        "transitivity: {} ⊆ {} ⊆ {} but rel({},{}) = {}",
                        name(i),
                        name(j),
                        name(k),
                        name(i),
                        name(k),
                        m.get(i, k)
                    )),
                    Relation::Exclusive if m.get(i, k) != Relation::Exclusive => {
                        out.push(format!(
                            "exclusion inheritance: {} ⊆ {} and {} ∩ {} = ∅ but rel({},{}) = {}",
                            name(i),
                            name(j),
                            name(j),
                            name(k),
                            name(i),
                            name(k),
                            m.get(i, k)
                        ))
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kidney() -> (TaxonomyTree, TaxonomyMatrix) {
        let t = parse_tree(KIDNEY_TREE).unwrap();
        let m = derive_matrix(&t).unwrap();
        (t, m)
    }

    fn rel(m: &TaxonomyMatrix, a: &str, b: &str) -> Relation {
        m.get(m.class_id(a).unwrap().0, m.class_id(b).unwrap().0)
    }

    #[test]
    fn two_node_containment() {
        let t = parse_tree("class Cortex\nclass Tuft\ncontains Cortex Tuft\n").unwrap();
        assert_eq!(t.edges(), &[(0, 1)]);
        assert!(t.exclusions().is_empty());
    }

    #[test]
    fn exclusion_and_containment() {
        let t = parse_tree(
            "class Medulla\nclass Cortex\nclass InnerCortex\n\
             exclusive Medulla Cortex\ncontains Cortex InnerCortex\n",
        )
        .unwrap();
        assert_eq!(t.edges().len(), 1);
        assert_eq!(t.exclusions(), &[(0, 1)]);
    }

    #[test]
    fn parse_errors() {
        // a genuine cycle where every node still has one parent
        assert!(matches!(
            parse_tree("class A\nclass B\nclass C\ncontains A B\ncontains B C\ncontains C A\n"),
            Err(TaxonomyError::Cycle(_))
        ));
        assert!(matches!(
            parse_tree("class A\nclass A\n"),
            Err(TaxonomyError::DuplicateClass(_))
        ));
        assert!(matches!(
            parse_tree("class A\nclass B\nclass C\ncontains A C\ncontains B C\n"),
            Err(TaxonomyError::MultipleParents { .. })
        ));
        assert!(matches!(
            parse_tree("class A\nclass B\ncontains A B\nexclusive A B\n"),
            Err(TaxonomyError::ContainedExclusion(..))
        ));
        assert!(matches!(
            parse_tree("class A\ncontains A Nope\n"),
            Err(TaxonomyError::UnknownClass { line: 2, .. })
        ));
        assert!(matches!(
            parse_tree("class A\nfrobnicate A\n"),
            Err(TaxonomyError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn mutual_containment_is_a_cycle() {
        assert_eq!(
            parse_tree("class A\nclass B\ncontains A B\ncontains B A\n"),
            Err(TaxonomyError::Cycle("A".into()))
        );
    }

    #[test]
    fn kidney_relations() {
        let (t, m) = kidney();
        assert_eq!(t.len(), 15);
        assert_eq!(rel(&m, "Tuft", "Capsule"), Relation::Subset);
        assert_eq!(rel(&m, "Capsule", "Tuft"), Relation::Superset);
        assert_eq!(rel(&m, "Medulla", "Cortex"), Relation::Exclusive);
        assert_eq!(rel(&m, "Podocyte", "Tuft"), Relation::Subset);
        assert_eq!(rel(&m, "DT", "PT"), Relation::Exclusive);
        assert_eq!(rel(&m, "Podocyte", "Mesangial"), Relation::Exclusive);
        assert_eq!(rel(&m, "DT", "Podocyte"), Relation::Exclusive);
        assert_eq!(rel(&m, "Medulla", "Podocyte"), Relation::Exclusive);
        assert_eq!(rel(&m, "Artery", "PTC"), Relation::Unrelated);
        assert_eq!(rel(&m, "SmoothMuscle", "MV"), Relation::Subset);
        assert!(validate_matrix(&m).is_empty());
    }

    #[test]
    fn single_class() {
        let t = parse_tree("class Only\n").unwrap();
        let m = derive_matrix(&t).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0, 0), Relation::Identity);
    }

    #[test]
    fn lookup_bounds() {
        let (_, m) = kidney();
        assert_eq!(relation_of(&m, ClassId(3), ClassId(3)).unwrap(), Relation::Identity);
        assert_eq!(
            relation_of(&m, ClassId(15), ClassId(0)),
            Err(TaxonomyError::IndexOutOfRange { index: 15, n: 15 })
        );
    }

    #[test]
    fn validate_flags_double_subset() {
        use Relation::*;
        let names = vec!["a".to_string(), "b".to_string()];
        let m = TaxonomyMatrix::from_relations(names, vec![Identity, Subset, Subset, Identity]);
        let v = validate_matrix(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("antisymmetry"));
    }

    #[test]
    fn validate_flags_broken_transitivity() {
        use Relation::*;
        let names = vec!["i".to_string(), "j".to_string(), "k".to_string()];
        #[rustfmt::skip]
        let rel = vec![
            Identity, Subset,   Unrelated,
            Superset, Identity, Subset,
            Unrelated, Superset, Identity,
        ];
        let v = validate_matrix(&TaxonomyMatrix::from_relations(names, rel));
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("transitivity"));
    }

    #[test]
    fn csv_roundtrip() {
        let (_, m) = kidney();
        let csv = m.to_csv();
        assert!(csv.starts_with("class,Medulla,Cortex"));
        assert_eq!(TaxonomyMatrix::from_csv(&csv).unwrap(), m);
    }

    #[test]
    fn text_roundtrip() {
        let (t, _) = kidney();
        assert_eq!(parse_tree(&t.to_text()).unwrap(), t);
    }
}
