use super::ast::{BinaryOp, Expr, Function, MacroKind, UnaryOp};
use super::{EvalError, Expression, Resolver, Value};

/// Evaluate `expr` against `env`. Evaluation never mutates `env`.
pub fn evaluate(expr: &Expression, env: &dyn Resolver) -> Result<Value, EvalError> {
    eval(&expr.root, env)
}

/// Evaluate a guard: the result must be a boolean.
pub fn evaluate_guard(expr: &Expression, env: &dyn Resolver) -> Result<bool, EvalError> {
    match evaluate(expr, env)? {
        Value::Bool(b) => Ok(b),
        _ => Err(EvalError::GuardNotBoolean(expr.source.clone())),
    }
}

/// A guard list passes iff every guard evaluates to true. Evaluation stops at
/// the first false guard.
pub fn evaluate_guards<'a>(
    guards: impl IntoIterator<Item = &'a Expression>,
    env: &dyn Resolver,
) -> Result<bool, EvalError> {
    for guard in guards {
        if !evaluate_guard(guard, env)? {
            return Ok(false);
        }
    }
    Ok(true)
}

struct Bound<'a> {
    name: &'a str,
    value: Value,
    parent: &'a dyn Resolver,
}

impl Resolver for Bound<'_> {
    fn lookup(&self, name: &str) -> Result<Value, EvalError> {
        if name == self.name {
            Ok(self.value.clone())
        } else {
            self.parent.lookup(name)
        }
    }

    fn random(&self) -> f64 {
        self.parent.random()
    }
}

fn mismatch(op: &str, got: &[&Value]) -> EvalError {
    EvalError::TypeMismatch {
        op: op.to_string(),
        got: got.iter().map(|v| v.type_name()).collect::<Vec<_>>().join(", "),
    }
}

fn eval(expr: &Expr, env: &dyn Resolver) -> Result<Value, EvalError> {
    match expr {
        Expr::Literal(v) => Ok(v.clone()),
        Expr::Var(name) => env.lookup(name),
        Expr::List(items) => Ok(Value::List(
            items.iter().map(|e| eval(e, env)).collect::<Result<_, _>>()?,
        )),
        Expr::Unary(op, inner) => {
            let v = eval(inner, env)?;
            match (op, &v) {
                (UnaryOp::Not, Value::Bool(b)) => Ok(Value::Bool(!b)),
                (UnaryOp::Neg, Value::Int(i)) => i
                    .checked_neg()
                    .map(Value::Int)
                    .ok_or(EvalError::Overflow("-".into())),
                (UnaryOp::Neg, Value::Float(f)) => Ok(Value::Float(-f)),
                (UnaryOp::Not, _) => Err(mismatch("!", &[&v])),
                (UnaryOp::Neg, _) => Err(mismatch("-", &[&v])),
            }
        }
        Expr::Binary(BinaryOp::And, l, r) => {
            let lv = eval(l, env)?;
            match lv {
                Value::Bool(false) => Ok(Value::Bool(false)),
                Value::Bool(true) => match eval(r, env)? {
                    Value::Bool(b) => Ok(Value::Bool(b)),
                    rv => Err(mismatch("&&", &[&lv, &rv])),
                },
                _ => Err(mismatch("&&", &[&lv])),
            }
        }
        Expr::Binary(BinaryOp::Or, l, r) => {
            let lv = eval(l, env)?;
            match lv {
                Value::Bool(true) => Ok(Value::Bool(true)),
                Value::Bool(false) => match eval(r, env)? {
                    Value::Bool(b) => Ok(Value::Bool(b)),
                    rv => Err(mismatch("||", &[&lv, &rv])),
                },
                _ => Err(mismatch("||", &[&lv])),
            }
        }
        Expr::Binary(op, l, r) => {
            let lv = eval(l, env)?;
            let rv = eval(r, env)?;
            binary(*op, &lv, &rv)
        }
        Expr::Member(target, field) => match eval(target, env)? {
            Value::Map(mut m) => m.remove(field).ok_or_else(|| EvalError::NoSuchKey(field.clone())),
            other => Err(mismatch(".", &[&other])),
        },
        Expr::Macro { kind, target, binder, body } => {
            let items = match eval(target, env)? {
                Value::List(items) => items,
                // Maps are traversed over their values in key order.
                Value::Map(m) => m.into_values().collect(),
                other => return Err(mismatch(kind.name(), &[&other])),
            };
            let apply = |item: Value| eval(body, &Bound { name: binder, value: item, parent: env });
            let predicate = |item: Value| match apply(item)? {
                Value::Bool(b) => Ok(b),
                other => Err(mismatch(kind.name(), &[&other])),
            };
            match kind {
                MacroKind::Map => Ok(Value::List(items.into_iter().map(apply).collect::<Result<_, _>>()?)),
                MacroKind::Filter => {
                    let mut kept = Vec::new();
                    for item in items {
                        if predicate(item.clone())? {
                            kept.push(item);
                        }
                    }
                    Ok(Value::List(kept))
                }
                MacroKind::Contains => {
                    for item in items {
                        if predicate(item)? {
                            return Ok(Value::Bool(true));
                        }
                    }
                    Ok(Value::Bool(false))
                }
                MacroKind::ExistsOne => {
                    let mut hits = 0usize;
                    for item in items {
                        if predicate(item)? {
                            hits += 1;
                        }
                    }
                    Ok(Value::Bool(hits == 1))
                }
            }
        }
        Expr::Call(Function::Size, args) => {
            let v = eval(&args[0], env)?;
            let n = match &v {
                Value::List(l) => l.len(),
                Value::Map(m) => m.len(),
                Value::String(s) => s.chars().count(),
                Value::Bytes(b) => b.len(),
                _ => return Err(mismatch("size", &[&v])),
            };
            Ok(Value::Int(n as i64))
        }
        Expr::Call(Function::Rand, _) => Ok(Value::Float(env.random())),
    }
}

fn binary(op: BinaryOp, lv: &Value, rv: &Value) -> Result<Value, EvalError> {
    use BinaryOp::*;
    match op {
        Eq => return Ok(Value::Bool(lv.loosely_equals(rv))),
        Ne => return Ok(Value::Bool(!lv.loosely_equals(rv))),
        Lt | Le | Gt | Ge => {
            let ord = lv.partial_order(rv).ok_or_else(|| mismatch(op.symbol(), &[lv, rv]))?;
            let result = match op {
                Lt => ord.is_lt(),
                Le => ord.is_le(),
                Gt => ord.is_gt(),
                _ => ord.is_ge(),
            };
            return Ok(Value::Bool(result));
        }
        _ => {}
    }
    match (lv, rv) {
        (Value::Int(a), Value::Int(b)) => {
            let (a, b) = (*a, *b);
            let result = match op {
                Add => a.checked_add(b),
                Sub => a.checked_sub(b),
                Mul => a.checked_mul(b),
                Div | Rem if b == 0 => return Err(EvalError::DivisionByZero),
                Div => a.checked_div(b),
                Rem => a.checked_rem(b),
                _ => unreachable!("comparison handled above"),
            };
            result.map(Value::Int).ok_or_else(|| EvalError::Overflow(op.symbol().to_string()))
        }
        (a, b) if a.is_number() && b.is_number() => {
            let (a, b) = (a.as_f64().unwrap_or_default(), b.as_f64().unwrap_or_default());
            match op {
                Add => Ok(Value::Float(a + b)),
                Sub => Ok(Value::Float(a - b)),
                Mul => Ok(Value::Float(a * b)),
                Div | Rem if b == 0.0 => Err(EvalError::DivisionByZero),
                Div => Ok(Value::Float(a / b)),
                Rem => Ok(Value::Float(a % b)),
                _ => unreachable!("comparison handled above"),
            }
        }
        (Value::String(a), Value::String(b)) if op == Add => Ok(Value::String(format!("{a}{b}"))),
        (Value::List(a), Value::List(b)) if op == Add => {
            Ok(Value::List(a.iter().chain(b).cloned().collect()))
        }
        _ => Err(mismatch(op.symbol(), &[lv, rv])),
    }
}
