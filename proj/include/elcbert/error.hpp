#pragma once

#include <stdexcept>
#include <string>

namespace elcbert {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Errors caused by user-supplied inputs: files, configs, command lines.
// The CLI maps these to exit code 1; any other Error exits 2.
struct InputError : Error {
    using Error::Error;
};

// --- tensor engine ---
struct ShapeMismatch : Error {
    using Error::Error;
};
struct EmptyAxis : Error {
    using Error::Error;
};
struct NotScalar : Error {
    using Error::Error;
};
struct DetachedTensor : Error {
    using Error::Error;
};
struct NonFiniteValue : Error {
    using Error::Error;
};

// --- layer mixing ---
struct InvalidLayerIndex : Error {
    using Error::Error;
};
struct EmptyVector : Error {
    using Error::Error;
};
struct LengthMismatch : Error {
    using Error::Error;
};
struct RowNotNormalized : Error {
    using Error::Error;
};

// --- encoder ---
struct IndexOutOfVocab : InputError {
    using InputError::InputError;
};
struct SequenceTooLong : InputError {
    using InputError::InputError;
};
struct MissingHeadWeights : Error {
    using Error::Error;
};

// --- training ---
struct NoMaskableTokens : InputError {
    using InputError::InputError;
};
struct NoLabeledPositions : InputError {
    using InputError::InputError;
};
struct StepOutOfRange : Error {
    using Error::Error;
};
struct NonFiniteGradient : Error {
    using Error::Error;
};
struct CorruptCheckpoint : InputError {
    using InputError::InputError;
};
struct VersionMismatch : InputError {
    using InputError::InputError;
};
struct WiringMismatch : InputError {
    using InputError::InputError;
};

// --- data ---
struct IoFailure : InputError {
    using InputError::InputError;
};
struct InvalidUtf8 : InputError {
    using InputError::InputError;
};
struct EmptyCorpus : InputError {
    using InputError::InputError;
};

// --- eval ---
struct NoScorablePairs : InputError {
    using InputError::InputError;
};
struct NotElcCheckpoint : InputError {
    using InputError::InputError;
};
struct EmptySentence : InputError {
    using InputError::InputError;
};

// --- cli ---
struct ConfigError : InputError {
    using InputError::InputError;
};

}  // namespace elcbert
