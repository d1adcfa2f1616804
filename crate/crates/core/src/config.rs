//! Constants, size-class routing and violation policy.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

/// Largest request served by fixed bins.
pub const FBIN_MAX_SIZE: usize = 512;
/// Requests at or above this size are served by direct page mappings.
pub const MMAP_THRESHOLD: usize = 128 * 1024;
/// Every bin manages exactly this many cells.
pub const CELLS_PER_BIN: usize = 1024;
/// Smallest fixed class.
pub const MIN_FBIN_CELL: usize = 16;
/// Span of the smallest bin; the reverse lookup indexes the heap in these units.
pub const MIN_BIN_SPAN: usize = CELLS_PER_BIN * MIN_FBIN_CELL;
/// Allocation granule and guaranteed alignment.
pub const GRANULE: usize = 16;
/// Smallest variable-bin cell.
pub const MIN_VBIN_CELL: usize = 512;
/// Largest variable-bin cell; serves everything up to `MMAP_THRESHOLD - 16`.
pub const MAX_VBIN_CELL: usize = 16384;
/// Requests at or above this are rejected with [`CapacityError`].
pub const MAX_REQUEST_SIZE: usize = 1 << 48;

pub const FIXED_CLASSES: usize = 6;
pub const VARIABLE_CLASSES: usize = 6;
pub const CLASS_COUNT: usize = FIXED_CLASSES + VARIABLE_CLASSES;

const _: () = assert!(MIN_BIN_SPAN == 16384);

/// Platform page size, queried once.
pub fn page_size() -> usize {
    static PAGE: OnceLock<usize> = OnceLock::new();
    *PAGE.get_or_init(|| {
        // SAFETY: sysconf has no preconditions.
        let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if v <= 0 {
            4096
        } else {
            v as usize
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("request of {0} bytes exceeds the addressable range")]
pub struct CapacityError(pub usize);

/// Where a request of a given size is served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClassRoute {
    Fixed { cell_size: usize },
    Variable { cell_size: usize, rounded_size: usize },
    External { rounded_size: usize },
}

impl SizeClassRoute {
    /// Bytes the caller may use after a successful allocation on this route.
    pub fn rounded_size(&self) -> usize {
        match *self {
            SizeClassRoute::Fixed { cell_size } => cell_size,
            SizeClassRoute::Variable { rounded_size, .. } => rounded_size,
            SizeClassRoute::External { rounded_size } => rounded_size,
        }
    }

    pub fn kind(&self) -> RouteKind {
        match self {
            SizeClassRoute::Fixed { .. } => RouteKind::Fixed,
            SizeClassRoute::Variable { .. } => RouteKind::Variable,
            SizeClassRoute::External { .. } => RouteKind::External,
        }
    }

    /// Bin class for the two in-heap routes.
    pub fn class(&self) -> Option<ClassId> {
        match *self {
            SizeClassRoute::Fixed { cell_size } => Some(ClassId::fixed(cell_size)),
            SizeClassRoute::Variable { cell_size, .. } => Some(ClassId::variable(cell_size)),
            SizeClassRoute::External { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RouteKind {
    Fixed,
    Variable,
    External,
}

impl fmt::Display for RouteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteKind::Fixed => "fixed",
            RouteKind::Variable => "variable",
            RouteKind::External => "external",
        })
    }
}

/// Dense index over the twelve bin classes: fixed 16..512 are 0..6,
/// variable 512..16384 are 6..12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(u8);

impl ClassId {
    pub fn fixed(cell_size: usize) -> ClassId {
        debug_assert!(cell_size.is_power_of_two());
        debug_assert!((MIN_FBIN_CELL..=FBIN_MAX_SIZE).contains(&cell_size));
        ClassId((cell_size.trailing_zeros() - MIN_FBIN_CELL.trailing_zeros()) as u8)
    }

    pub fn variable(cell_size: usize) -> ClassId {
        debug_assert!(cell_size.is_power_of_two());
        debug_assert!((MIN_VBIN_CELL..=MAX_VBIN_CELL).contains(&cell_size));
        ClassId(
            (FIXED_CLASSES as u32 + cell_size.trailing_zeros() - MIN_VBIN_CELL.trailing_zeros())
                as u8,
        )
    }

    pub fn from_index(index: usize) -> Option<ClassId> {
        (index < CLASS_COUNT).then_some(ClassId(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_fixed(self) -> bool {
        (self.0 as usize) < FIXED_CLASSES
    }

    /// log2 of the class' cell size.
    pub fn shift(self) -> u32 {
        if self.is_fixed() {
            MIN_FBIN_CELL.trailing_zeros() + self.0 as u32
        } else {
            MIN_VBIN_CELL.trailing_zeros() + (self.0 as usize - FIXED_CLASSES) as u32
        }
    }

    pub fn cell_size(self) -> usize {
        1 << self.shift()
    }

    /// Heap bytes covered by one bin of this class.
    pub fn span(self) -> usize {
        CELLS_PER_BIN << self.shift()
    }

    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..CLASS_COUNT as u8).map(ClassId)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.is_fixed() { "f" } else { "v" };
        write!(f, "{kind}{}", self.cell_size())
    }
}

/// Next power of two at or above `max(request_size, 16)`.
pub fn round_fixed(request_size: usize) -> usize {
    debug_assert!(request_size <= FBIN_MAX_SIZE);
    request_size.max(MIN_FBIN_CELL).next_power_of_two()
}

/// Next multiple of 16 at or above `request_size`.
pub fn round_variable(request_size: usize) -> usize {
    (request_size + GRANULE - 1) & !(GRANULE - 1)
}

fn round_page(len: usize) -> usize {
    let page = page_size();
    (len + page - 1) & !(page - 1)
}

/// Routes a request to one of the three size classes.
pub fn classify(request_size: usize) -> Result<SizeClassRoute, CapacityError> {
    if request_size >= MAX_REQUEST_SIZE {
        return Err(CapacityError(request_size));
    }
    Ok(if request_size <= FBIN_MAX_SIZE {
        SizeClassRoute::Fixed {
            cell_size: round_fixed(request_size),
        }
    } else if request_size < MMAP_THRESHOLD {
        let rounded_size = round_variable(request_size);
        // Largest power of two strictly below the rounded size.
        let below = 1usize << (usize::BITS - 1 - (rounded_size - 1).leading_zeros());
        SizeClassRoute::Variable {
            cell_size: below.clamp(MIN_VBIN_CELL, MAX_VBIN_CELL),
            rounded_size,
        }
    } else {
        SizeClassRoute::External {
            rounded_size: round_page(request_size),
        }
    })
}

/// Reaction to a detected double or invalid free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyAction {
    Ignore,
    #[default]
    Report,
    ReportAndAbort,
}

impl PolicyAction {
    pub fn parse(s: &str) -> Option<PolicyAction> {
        match s.trim() {
            "ignore" => Some(PolicyAction::Ignore),
            "report" => Some(PolicyAction::Report),
            "abort" => Some(PolicyAction::ReportAndAbort),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyAction::Ignore => "ignore",
            PolicyAction::Report => "report",
            PolicyAction::ReportAndAbort => "abort",
        }
    }
}

impl fmt::Display for PolicyAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViolationPolicy {
    pub on_double_free: PolicyAction,
    pub on_invalid_free: PolicyAction,
}

/// Environment variable consulted by [`ViolationPolicy::from_env`].
pub const POLICY_ENV: &str = "OOBHEAP_POLICY";

impl ViolationPolicy {
    pub const fn uniform(action: PolicyAction) -> ViolationPolicy {
        ViolationPolicy {
            on_double_free: action,
            on_invalid_free: action,
        }
    }

    /// Reads `OOBHEAP_POLICY` (ignore|report|abort). Unset or unparsable
    /// values keep the default.
    ///
    /// Does not allocate, so it is usable while the process allocator
    /// is being initialized.
    pub fn from_env() -> ViolationPolicy {
        const NAME: &[u8] = b"OOBHEAP_POLICY\0";
        // SAFETY: NAME is NUL-terminated; getenv returns NULL or a C string
        // owned by the environment that we only read immediately.
        let value = unsafe { libc::getenv(NAME.as_ptr().cast()) };
        if value.is_null() {
            return ViolationPolicy::default();
        }
        // SAFETY: non-null result of getenv is a valid C string.
        let bytes = unsafe { std::ffi::CStr::from_ptr(value) }.to_bytes();
        std::str::from_utf8(bytes)
            .ok()
            .and_then(PolicyAction::parse)
            .map(ViolationPolicy::uniform)
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classify_examples() {
        assert_eq!(classify(512), Ok(SizeClassRoute::Fixed { cell_size: 512 }));
        assert_eq!(
            classify(513),
            Ok(SizeClassRoute::Variable { cell_size: 512, rounded_size: 528 })
        );
        assert_eq!(
            classify(131072),
            Ok(SizeClassRoute::External { rounded_size: 131072 })
        );
        assert_eq!(classify(0), Ok(SizeClassRoute::Fixed { cell_size: 16 }));
        assert_eq!(
            classify(100000),
            Ok(SizeClassRoute::Variable { cell_size: 16384, rounded_size: 100000 })
        );
        assert_eq!(classify(MAX_REQUEST_SIZE), Err(CapacityError(MAX_REQUEST_SIZE)));
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_fixed(100), 128);
        assert_eq!(round_fixed(512), 512);
        assert_eq!(round_fixed(1), 16);
        assert_eq!(round_variable(513), 528);
        assert_eq!(round_variable(1000), 1008);
        assert_eq!(round_variable(528), 528);
    }

    #[test]
    fn variable_ladder_boundaries() {
        // 1024 rounds to 1024; strictly-below rule keeps it in the 512 class.
        assert_eq!(
            classify(1024),
            Ok(SizeClassRoute::Variable { cell_size: 512, rounded_size: 1024 })
        );
        assert_eq!(
            classify(1025),
            Ok(SizeClassRoute::Variable { cell_size: 1024, rounded_size: 1040 })
        );
        assert_eq!(
            classify(MMAP_THRESHOLD - 1),
            Ok(SizeClassRoute::Variable { cell_size: 16384, rounded_size: MMAP_THRESHOLD })
        );
    }

    #[test]
    fn class_ids() {
        assert_eq!(ClassId::fixed(16).index(), 0);
        assert_eq!(ClassId::fixed(512).index(), 5);
        assert_eq!(ClassId::variable(512).index(), 6);
        assert_eq!(ClassId::variable(16384).index(), 11);
        for class in ClassId::all() {
            assert_eq!(class.span(), CELLS_PER_BIN * class.cell_size());
            assert_eq!(class.span() % MIN_BIN_SPAN, 0);
        }
        assert_eq!(ClassId::variable(512).span(), 524288);
    }

    #[test]
    fn policy_parse() {
        assert_eq!(PolicyAction::parse("abort"), Some(PolicyAction::ReportAndAbort));
        assert_eq!(PolicyAction::parse("nope"), None);
        assert_eq!(ViolationPolicy::default(), ViolationPolicy::uniform(PolicyAction::Report));
    }

    proptest! {
        #[test]
        fn classify_partitions(size in 0usize..(1 << 48)) {
            let route = classify(size).unwrap();
            match route {
                SizeClassRoute::Fixed { cell_size } => {
                    prop_assert!(size <= FBIN_MAX_SIZE);
                    prop_assert!(cell_size.is_power_of_two() && (16..=512).contains(&cell_size));
                    prop_assert!(cell_size >= size);
                }
                SizeClassRoute::Variable { cell_size, rounded_size } => {
                    prop_assert!(size > FBIN_MAX_SIZE && size < MMAP_THRESHOLD);
                    prop_assert!(cell_size < rounded_size);
                    prop_assert_eq!(rounded_size % 16, 0);
                    prop_assert!(rounded_size >= size && rounded_size < size + 16);
                    prop_assert!([512, 1024, 2048, 4096, 8192, 16384].contains(&cell_size));
                    prop_assert!(cell_size == 16384 || rounded_size <= 2 * cell_size);
                }
                SizeClassRoute::External { rounded_size } => {
                    prop_assert!(size >= MMAP_THRESHOLD);
                    prop_assert!(rounded_size >= size);
                    prop_assert_eq!(rounded_size % page_size(), 0);
                }
            }
        }

        #[test]
        fn round_fixed_bounds(size in 1usize..=512) {
            let r = round_fixed(size);
            prop_assert!(r >= size);
            prop_assert!(r < 2 * size.max(16));
        }
    }
}
