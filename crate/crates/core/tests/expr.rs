//! Expression language conformance.

use csm_core::expr::{evaluate_guard, EvalError, Environment};
use csm_core::{evaluate, parse_expression, Value};
use proptest::prelude::*;

fn eval(src: &str, env: &Environment) -> Result<Value, EvalError> {
    evaluate(&parse_expression(src).unwrap(), env)
}

fn ints(xs: &[i64]) -> Value {
    Value::List(xs.iter().map(|&x| Value::Int(x)).collect())
}

fn env(pairs: Vec<(&str, Value)>) -> Environment {
    Environment::from_pairs(pairs)
}

#[test]
fn constants_and_literals() {
    let e = Environment::new();
    assert_eq!(eval("5 * 5", &e), Ok(Value::Int(25)));
    assert_eq!(eval("5", &e), Ok(Value::Int(5)));
    assert_eq!(eval("true", &e), Ok(Value::Bool(true)));
    assert_eq!(eval("[1, 2, 3]", &e), Ok(ints(&[1, 2, 3])));
}

#[test]
fn parse_shapes() {
    assert_eq!(parse_expression("5 * 5").unwrap().root.to_string(), "(5 * 5)");
    assert_eq!(parse_expression("[1, 2, 3]").unwrap().root.to_string(), "[1, 2, 3]");
    let map = parse_expression("b.map(x, x * x)").unwrap();
    assert_eq!(map.root.to_string(), "b.map(x, (x * x))");
    assert_eq!(map.root.free_variables(), vec!["b".to_string()]);
    assert!(parse_expression("5 *").is_err());
}

#[test]
fn map_over_list_variable() {
    let e = env(vec![("b", ints(&[1, 2, 3])), ("list_variable", ints(&[4, 5]))]);
    assert_eq!(eval("b.map(x, x * x)", &e), Ok(ints(&[1, 4, 9])));
    assert_eq!(eval("list_variable.map(x, x * x)", &e), Ok(ints(&[16, 25])));
}

#[test]
fn contains_over_static_data() {
    let e = env(vec![("f", ints(&[1, 4, 9]))]);
    assert_eq!(eval("f.contains(x, x < 10)", &e), Ok(Value::Bool(true)));
}

#[test]
fn exists_one_over_records() {
    let rec = |ok: bool| Value::Map([("success".to_string(), Value::Bool(ok))].into());
    let one = env(vec![("dict_variable", Value::List(vec![rec(false), rec(true), rec(false)]))]);
    assert_eq!(eval("dict_variable.exists_one(x, x.success==true)", &one), Ok(Value::Bool(true)));
    let two = env(vec![("dict_variable", Value::List(vec![rec(true), rec(true)]))]);
    assert_eq!(eval("dict_variable.exists_one(x, x.success==true)", &two), Ok(Value::Bool(false)));
}

#[test]
fn list_compared_with_number_is_a_type_mismatch() {
    let e = env(vec![("b", ints(&[1, 2, 3]))]);
    assert!(matches!(eval("b < 100", &e), Err(EvalError::TypeMismatch { .. })));
}

#[test]
fn guards() {
    let g = |src: &str, e: &Environment| evaluate_guard(&parse_expression(src).unwrap(), e);
    assert_eq!(g("b < 100", &env(vec![("b", Value::Int(5))])), Ok(true));
    assert_eq!(g("g==true", &env(vec![("g", Value::Bool(false))])), Ok(false));
    assert!(matches!(g("5 + 5", &Environment::new()), Err(EvalError::GuardNotBoolean(_))));
}

#[test]
fn match_case_value() {
    let e = env(vec![("v", Value::Int(5))]);
    assert_eq!(eval("v == 5", &e), Ok(Value::Bool(true)));
}

#[test]
fn missing_names_and_arithmetic_faults_are_errors() {
    let e = Environment::new();
    assert_eq!(eval("q + 1", &e), Err(EvalError::UnboundVariable("q".into())));
    assert_eq!(eval("1 / 0", &e), Err(EvalError::DivisionByZero));
    assert!(matches!(eval("9223372036854775807 + 1", &e), Err(EvalError::Overflow(_))));
}

#[test]
fn rand_is_reproducible_with_a_seed() {
    let a = Environment::new().with_seed(7);
    let b = Environment::new().with_seed(7);
    let x = eval("rand()", &a).unwrap();
    assert_eq!(Ok(x.clone()), eval("rand()", &b));
    match x {
        Value::Float(f) => assert!((0.0..1.0).contains(&f)),
        other => panic!("{other:?}"),
    }
}

fn count(l: &[i64], t: i64) -> usize {
    l.iter().filter(|&&x| x < t).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn macro_identities(l in proptest::collection::vec(-20i64..20, 0..=8), t in -20i64..20) {
        let e = env(vec![("l", ints(&l)), ("t", Value::Int(t))]);
        let filtered = eval("l.filter(x, x < t)", &e).unwrap();
        let Value::List(items) = &filtered else { panic!("{filtered:?}") };
        prop_assert_eq!(items.len(), count(&l, t));
        let n = Value::Int(items.len() as i64);
        let e = env(vec![("l", ints(&l)), ("t", Value::Int(t)), ("n", n)]);
        prop_assert_eq!(eval("l.contains(x, x < t)", &e).unwrap(), eval("n >= 1", &e).unwrap());
        prop_assert_eq!(eval("l.exists_one(x, x < t)", &e).unwrap(), eval("n == 1", &e).unwrap());
        prop_assert_eq!(eval("l.contains(x, x < t)", &e).unwrap(), Value::Bool(count(&l, t) >= 1));
        prop_assert_eq!(eval("l.exists_one(x, x < t)", &e).unwrap(), Value::Bool(count(&l, t) == 1));
        // map keeps length and order; filter is an order-preserving subsequence.
        prop_assert_eq!(eval("l.map(x, x * 2)", &e).unwrap(), ints(&l.iter().map(|x| x * 2).collect::<Vec<_>>()));
        prop_assert_eq!(filtered, ints(&l.iter().copied().filter(|&x| x < t).collect::<Vec<_>>()));
        prop_assert_eq!(eval("l.size()", &e).unwrap(), Value::Int(l.len() as i64));
    }
}
